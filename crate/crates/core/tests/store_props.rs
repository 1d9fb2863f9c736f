use std::fs;

use discover_core::octa_store::{encode_labels, read_bundle, write_bundle, OctaBundle, Plane, SurfaceMap, Volume, MAX_GRADE};
use proptest::prelude::*;
use serde_json::Value;

fn arb_bundle() -> impl Strategy<Value = OctaBundle> {
    (1usize..5, 2usize..7, 1usize..5, 0u8..=MAX_GRADE).prop_flat_map(|(nx, ny, nz, grade)| {
        let n3 = nx * ny * nz;
        let n2 = nx * nz;
        (
            prop::collection::vec(0.0f32..=1.0, n3),
            prop::collection::vec(0.0f32..=1.0, n3),
            prop::collection::vec(0.0f32..=1.0, n2),
            prop::collection::vec((0..ny, 0..ny), n2),
        )
            .prop_map(move |(flow, structure, lso, surf)| {
                let (ilm, chorio): (Vec<usize>, Vec<usize>) =
                    surf.into_iter().map(|(a, b)| (a.min(b), a.max(b))).unzip();
                OctaBundle {
                    id: format!("b{nx}{ny}{nz}"),
                    grade,
                    flow: Volume { dims: [nx, ny, nz], data: flow },
                    structure: Volume { dims: [nx, ny, nz], data: structure },
                    lso: Plane { dims: [nx, nz], data: lso },
                    ilm: SurfaceMap { dims: [nx, nz], depths: ilm },
                    chorio: SurfaceMap { dims: [nx, nz], depths: chorio },
                    spacing_mm: [0.01, 0.002, 0.01],
                }
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn write_read_round_trip_is_bit_exact(b in arb_bundle()) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bundle");
        write_bundle(&b, &path).unwrap();
        let back = read_bundle(&path).unwrap();
        let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&back.flow.data), bits(&b.flow.data));
        prop_assert_eq!(bits(&back.structure.data), bits(&b.structure.data));
        prop_assert_eq!(bits(&back.lso.data), bits(&b.lso.data));
        prop_assert_eq!(back, b);
    }

    #[test]
    fn changed_dims_in_meta_are_rejected(b in arb_bundle(), axis in 0usize..3) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bundle");
        write_bundle(&b, &path).unwrap();
        let meta_path = path.join("meta.json");
        let mut meta: Value = serde_json::from_str(&fs::read_to_string(&meta_path).unwrap()).unwrap();
        let d = meta["dims"][axis].as_u64().unwrap();
        meta["dims"][axis] = Value::from(d + 1);
        fs::write(&meta_path, serde_json::to_string(&meta).unwrap()).unwrap();
        prop_assert!(read_bundle(&path).is_err());
    }
}

#[test]
fn labels_are_monotone_and_decode_inverts_encode() {
    for g in 0..=MAX_GRADE {
        let l = encode_labels(g).unwrap();
        assert!(l.lambda.windows(2).all(|w| w[0] >= w[1]));
        assert_eq!(l.decode(), g);
    }
    assert_eq!(encode_labels(3).unwrap().lambda, [1, 1, 1, 0]);
}
