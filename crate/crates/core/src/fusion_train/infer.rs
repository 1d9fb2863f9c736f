use super::model::Model;
use super::{decode_grade, fuse, second_branch_forward, EnsemblePrediction};
use crate::attribution::{attribution_map, select_bscans, AttributionMap, EvalEnsemble, SelectMode, SelectedBScans};
use crate::ensemble::{ensemble_forward, AugmentParams, DropoutMask};
use crate::error::{Error, Result};
use crate::octa_store::{OctaBundle, Volume3C, N_CUTOFFS};
use crate::preprocess::{preprocess_bundle, PreprocessConfig, PreprocessedVolume};
use crate::projector::{projector_forward, SummaryImage};
use crate::synthgen::{derive_seed, stream_rng};

/// Prediction plus the intermediate products shown in reports.
#[derive(Clone, Debug, PartialEq)]
pub struct InferenceDetail {
    pub prediction: EnsemblePrediction,
    pub summary: SummaryImage,
    pub attribution: AttributionMap,
    pub slices: SelectedBScans,
}

pub enum InferInput<'a> {
    Raw(&'a OctaBundle),
    Preprocessed(&'a PreprocessedVolume),
}

fn mean_rows(rows: &[Vec<f64>]) -> Vec<f64> {
    let mut acc = vec![0.0; rows[0].len()];
    for r in rows {
        for (a, v) in acc.iter_mut().zip(r) {
            *a += v;
        }
    }
    acc.iter().map(|a| a / rows.len() as f64).collect()
}

/// Full pipeline on a preprocessed volume: projection, first ensemble,
/// attribution, argmax slice selection and, when `use_c2`, the second
/// ensemble and fusion. Randomness comes only from a stream keyed on
/// `seed` and `id`.
pub fn infer_volume(
    model: &Model,
    id: &str,
    volume: &Volume3C,
    seed: u64,
    use_c2: bool,
) -> Result<InferenceDetail> {
    let mut rng = stream_rng(derive_seed(seed, id), "infer");
    let summary = projector_forward(volume, &model.projector, &model.store)?;
    let image = summary.to_tensor();

    let c1 = &model.c1;
    let draws = c1.config.inference_draws;
    let p1_draws = (0..draws)
        .map(|_| {
            let aug: Vec<AugmentParams> = (0..c1.len()).map(|_| c1.config.augment.draw(&mut rng)).collect();
            ensemble_forward(&image, c1, &model.store, &DropoutMask::full(c1.len()), &aug, c1.config.mode)
        })
        .collect::<Result<Vec<_>>>()?;
    let p1 = mean_rows(&p1_draws);

    let clf = EvalEnsemble {
        ensemble: c1,
        store: &model.store,
    };
    let attribution = attribution_map(&image, &clf, model.config.attribution)?;
    let slices = select_bscans(volume, &attribution.alpha, SelectMode::Inference, &mut rng)?;

    let (p2, p) = if use_c2 {
        let c2 = &model.c2;
        let p2_draws = (0..c2.config.inference_draws)
            .map(|_| {
                let aug: Vec<Vec<AugmentParams>> = (0..c2.len())
                    .map(|_| (0..N_CUTOFFS).map(|_| c2.config.augment.draw(&mut rng)).collect())
                    .collect();
                second_branch_forward(&slices, c2, &model.store, &DropoutMask::full(c2.len()), &aug)
            })
            .collect::<Result<Vec<_>>>()?;
        let p2 = mean_rows(&p2_draws);
        let p = fuse(&p1, &p2);
        (Some(p2), p)
    } else {
        (None, p1.clone())
    };
    if p.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical(format!("non-finite prediction for {id}")));
    }
    Ok(InferenceDetail {
        prediction: EnsemblePrediction {
            id: id.to_string(),
            grade_hat: decode_grade(&p),
            p1,
            p2,
            p,
            z_indices: slices.z_indices.clone(),
        },
        summary,
        attribution,
        slices,
    })
}

/// Inference on a raw bundle (preprocessed with `preprocess`) or on an
/// already preprocessed volume.
pub fn infer(
    model: &Model,
    input: InferInput,
    preprocess: PreprocessConfig,
    seed: u64,
    use_c2: bool,
) -> Result<InferenceDetail> {
    match input {
        InferInput::Raw(bundle) => {
            let pre = preprocess_bundle(bundle, preprocess)?;
            infer_volume(model, &pre.id, &pre.volume, seed, use_c2)
        }
        InferInput::Preprocessed(pre) => {
            if pre.config != preprocess {
                return Err(Error::Config(format!(
                    "volume {} preprocessed with {:?}, checkpoint expects {:?}",
                    pre.id, pre.config, preprocess
                )));
            }
            infer_volume(model, &pre.id, &pre.volume, seed, use_c2)
        }
    }
}
