//! Reconstruction, cross-entropy and bidirectional InfoNCE losses, and their
//! weighted combination.

use serde::{Deserialize, Serialize};

use crate::error::{Result, TurboError};
use crate::model::Task;
use crate::tensor::{Graph, Real, Tensor, Var};

/// Base of the logarithm in the loss weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum LogBase {
    #[default]
    E,
    Two,
    Ten,
}

impl LogBase {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "e" => Some(LogBase::E),
            "2" => Some(LogBase::Two),
            "10" => Some(LogBase::Ten),
            _ => None,
        }
    }

    pub fn log(self, x: f64) -> f64 {
        match self {
            LogBase::E => x.ln(),
            LogBase::Two => x.log2(),
            LogBase::Ten => x.log10(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            LogBase::E => "e",
            LogBase::Two => "2",
            LogBase::Ten => "10",
        }
    }
}

/// `1 / log(num_classes)`.
pub fn lambda_ce(num_classes: usize, base: LogBase) -> Result<f64> {
    if num_classes < 2 {
        return Err(TurboError::Config(format!("lambda_ce needs at least 2 classes, got {num_classes}")));
    }
    Ok(1.0 / base.log(num_classes as f64))
}

/// `1 / log(batch_size)`; with natural log this rescales the chance-level
/// InfoNCE value `ln B` to exactly 1.
pub fn lambda_nce(batch_size: usize, base: LogBase) -> Result<f64> {
    if batch_size < 2 {
        return Err(TurboError::Config(format!("InfoNCE needs a batch of at least 2, got {batch_size}")));
    }
    Ok(1.0 / base.log(batch_size as f64))
}

/// Mean squared error over all elements; exactly 0 with no targets.
pub fn pmae_loss<F: Real>(g: &mut Graph<F>, predicted: Option<Var>, target: &Tensor<F>) -> Result<Var> {
    match predicted {
        None => {
            if target.numel() != 0 {
                return Err(TurboError::Contract("reconstruction targets without predictions".into()));
            }
            Ok(g.constant(Tensor::scalar(F::zero())))
        }
        Some(pred) => {
            if g.shape(pred) != target.shape() {
                return Err(TurboError::Shape(format!(
                    "prediction {:?} vs target {:?}",
                    g.shape(pred),
                    target.shape()
                )));
            }
            if target.numel() == 0 {
                return Ok(g.constant(Tensor::scalar(F::zero())));
            }
            let t = g.constant(target.clone());
            let diff = g.sub(pred, t)?;
            let sq = g.mul(diff, diff)?;
            Ok(g.mean(sq))
        }
    }
}

/// Softmax cross-entropy of `[B, C]` logits, averaged over the batch.
pub fn ce_loss<F: Real>(g: &mut Graph<F>, logits: Var, labels: &[usize]) -> Result<Var> {
    let shape = g.shape(logits).to_vec();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(TurboError::Shape(format!("logits {:?} for {} labels", shape, labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= shape[1]) {
        return Err(TurboError::Data(format!("label {bad} out of range for {} classes", shape[1])));
    }
    let lsm = g.log_softmax(logits, -1)?;
    let picked = g.pick(lsm, labels)?;
    let m = g.mean(picked);
    Ok(g.scale(m, -F::one()))
}

/// Bidirectional InfoNCE with in-batch negatives:
/// `-1/2 mean_i [log softmax_row(S)_ii + log softmax_col(S)_ii]`,
/// `S_ij = z_v,i . z_t,j / temperature`.
pub fn info_nce<F: Real>(g: &mut Graph<F>, z_v: Var, z_t: Var, temperature: f64) -> Result<Var> {
    let (sv, st) = (g.shape(z_v).to_vec(), g.shape(z_t).to_vec());
    if sv.len() != 2 || sv != st {
        return Err(TurboError::Shape(format!("embeddings {sv:?} and {st:?} must both be [B, P]")));
    }
    let b = sv[0];
    if b < 2 {
        return Err(TurboError::Config(format!("InfoNCE needs a batch of at least 2, got {b}")));
    }
    if temperature <= 0.0 {
        return Err(TurboError::Config(format!("temperature must be positive, got {temperature}")));
    }
    let sim = g.matmul_t(z_v, z_t, false, true)?;
    let sim = g.scale(sim, F::c(1.0 / temperature));
    let diag: Vec<usize> = (0..b).collect();
    let v2t = g.log_softmax(sim, 1)?;
    let v2t = g.pick(v2t, &diag)?;
    let t2v = g.log_softmax(sim, 0)?;
    let t2v = g.pick(t2v, &diag)?;
    let both = g.add(v2t, t2v)?;
    let m = g.mean(both);
    Ok(g.scale(m, F::c(-0.5)))
}

/// Individual loss values; parts not used by a task are zero.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub pmae: f64,
    pub ce: f64,
    pub nce: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_ce: f64,
    pub lambda_nce: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub total: f64,
    pub parts: LossParts,
    pub weights: LossWeights,
}

/// Graph-level combination: `lambda_ce*ce + pmae` for classification tasks,
/// `lambda_nce*nce + pmae` for contrastive training.
pub fn combine_graph<F: Real>(
    g: &mut Graph<F>,
    task: Task,
    downstream: Option<Var>,
    pmae: Var,
    weights: LossWeights,
) -> Result<(Var, LossBundle)> {
    let d = downstream.ok_or_else(|| TurboError::Contract(format!("task {} needs a downstream loss", task.name())))?;
    let lambda = if task.uses_classifier() { weights.lambda_ce } else { weights.lambda_nce };
    let weighted = g.scale(d, F::c(lambda));
    let total = g.add(weighted, pmae)?;
    let dv = g.value(d).item().to_f64().unwrap();
    let mut parts = LossParts { pmae: g.value(pmae).item().to_f64().unwrap(), ..LossParts::default() };
    if task.uses_classifier() {
        parts.ce = dv;
    } else {
        parts.nce = dv;
    }
    let bundle = LossBundle { total: g.value(total).item().to_f64().unwrap(), parts, weights };
    Ok((total, bundle))
}

/// Scalar combination of already-computed parts.
pub fn combine(task: Task, parts: LossParts, weights: LossWeights) -> LossBundle {
    let total = if task.uses_classifier() {
        weights.lambda_ce * parts.ce + parts.pmae
    } else {
        weights.lambda_nce * parts.nce + parts.pmae
    };
    LossBundle { total, parts, weights }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lambda_values() {
        assert!((lambda_ce(101, LogBase::E).unwrap() - 0.216_679_4).abs() < 1e-6);
        assert!((lambda_ce(16, LogBase::E).unwrap() - 0.360_674).abs() < 1e-6);
        assert!((lambda_nce(32, LogBase::E).unwrap() - 0.288_539).abs() < 1e-6);
        assert!((lambda_nce(2, LogBase::E).unwrap() - 1.442_695).abs() < 1e-6);
        assert!(lambda_ce(1, LogBase::E).is_err());
        assert!(lambda_nce(1, LogBase::E).is_err());
        assert!((lambda_ce(100, LogBase::Ten).unwrap() - 0.5).abs() < 1e-15);
        let ws: Vec<f64> = (2..50).map(|c| lambda_ce(c, LogBase::E).unwrap()).collect();
        assert!(ws.windows(2).all(|w| w[0] > w[1]));
    }

    #[test]
    fn ce_uniform_and_confident() {
        let mut g = Graph::<f64>::new();
        let z = g.constant(Tensor::zeros(&[2, 5]));
        let l = ce_loss(&mut g, z, &[0, 3]).unwrap();
        assert!((g.value(l).item() - 5f64.ln()).abs() < 1e-12);
        let z = g.constant(Tensor::from_f64(&[1, 3], &[0.0, 80.0, 0.0]).unwrap());
        let l = ce_loss(&mut g, z, &[1]).unwrap();
        assert!(g.value(l).item() < 1e-30);
        assert!(matches!(ce_loss(&mut g, z, &[3]), Err(TurboError::Data(_))));
    }

    #[test]
    fn combine_matches_weighted_sum() {
        let w = LossWeights { lambda_ce: 0.5, lambda_nce: 0.25 };
        let p = LossParts { pmae: 1.0, ce: 2.0, nce: 4.0 };
        assert_eq!(combine(Task::Classify, p, w).total, 2.0);
        assert_eq!(combine(Task::Contrast, p, w).total, 2.0);
        let p0 = LossParts { pmae: 0.0, ..p };
        assert_eq!(combine(Task::Classify, p0, w).total, 1.0);
    }

    #[test]
    fn combine_graph_requires_downstream() {
        let mut g = Graph::<f32>::new();
        let z = g.constant(Tensor::scalar(0.0));
        assert!(matches!(
            combine_graph(&mut g, Task::Classify, None, z, LossWeights::default()),
            Err(TurboError::Contract(_))
        ));
    }
}
