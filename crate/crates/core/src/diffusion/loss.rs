use crate::model::{Bound, Condition};
use crate::tensor::{Graph, SeededRng, Tensor, Var};

use super::{q_sample, DiffusionSchedule, Result};

/// Probability of swapping the condition for the null condition in training.
pub const COND_DROPOUT: f64 = 0.1;

/// Random draws behind one loss evaluation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossDraw {
    pub t: usize,
    pub dropped: bool,
}

/// ε-prediction MSE with an arbitrary predictor. Draw order from `rng`: the
/// timestep, the dropout coin, then ε.
#[allow(clippy::too_many_arguments)]
pub fn training_loss_with<F>(
    g: &mut Graph,
    x0: &Tensor,
    cond: &Condition,
    null: &Condition,
    rng: &mut SeededRng,
    schedule: &DiffusionSchedule,
    p_uncond: f64,
    mut predict: F,
) -> Result<(Var, LossDraw)>
where
    F: FnMut(&mut Graph, &Tensor, f64, &Condition, &Tensor) -> Result<Var>,
{
    let t = rng.below(schedule.num_steps());
    let dropped = rng.uniform() < p_uncond;
    let eps = Tensor::randn(x0.shape(), 1.0, rng);
    let x_t = q_sample(x0, t, &eps, schedule)?;
    let cond = if dropped { null } else { cond };
    let pred = predict(g, &x_t, t as f64, cond, &eps)?;
    let target = g.constant(eps);
    let diff = g.sub(pred, target)?;
    let sq = g.mul(diff, diff)?;
    Ok((g.mean(sq)?, LossDraw { t, dropped }))
}

/// `‖ε̂(x_t, t, c) − ε‖² / numel` for a bound model.
pub fn training_loss(
    g: &mut Graph,
    model: &Bound,
    x0: &Tensor,
    cond: &Condition,
    rng: &mut SeededRng,
    schedule: &DiffusionSchedule,
) -> Result<(Var, LossDraw)> {
    let null = Condition::null_for(model.config());
    training_loss_with(
        g,
        x0,
        cond,
        &null,
        rng,
        schedule,
        COND_DROPOUT,
        |g, x_t, t, c, _| Ok(model.forward(g, x_t, t, c)?),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{InitScheme, Model, ModelConfig, Variant};
    use crate::tensor::central_difference;

    fn x0() -> Tensor {
        Tensor::randn(&[4, 8, 8], 1.0, &mut SeededRng::new(3, 0))
    }

    #[test]
    fn perfect_predictor_has_zero_loss() {
        let s = DiffusionSchedule::default();
        let null = Condition::Class(None);
        for seed in 0..5 {
            let mut g = Graph::new();
            let (l, _) = training_loss_with(
                &mut g,
                &x0(),
                &null,
                &null,
                &mut SeededRng::new(seed, 0),
                &s,
                0.1,
                |g, _, _, _, eps| Ok(g.constant(eps.clone())),
            )
            .unwrap();
            assert_eq!(g.value(l).item(), 0.0);
        }
    }

    #[test]
    fn zero_predictor_has_unit_loss() {
        let s = DiffusionSchedule::default();
        let null = Condition::Class(None);
        let n = 200;
        let mean = (0..n)
            .map(|seed| {
                let mut g = Graph::new();
                let (l, _) = training_loss_with(
                    &mut g,
                    &x0(),
                    &null,
                    &null,
                    &mut SeededRng::new(seed, 0),
                    &s,
                    0.1,
                    |g, x, _, _, _| Ok(g.constant(Tensor::zeros(x.shape()))),
                )
                .unwrap();
                g.value(l).item()
            })
            .sum::<f64>()
            / n as f64;
        // 256 elements per draw: the mean over 200 draws has sd ≈ √(2/51200).
        assert!((mean - 1.0).abs() < 0.03, "{mean}");
    }

    #[test]
    fn dropout_rate_is_ten_percent() {
        let s = DiffusionSchedule::default();
        let cond = Condition::Class(Some(1));
        let null = Condition::Class(None);
        let n = 5000;
        let mut dropped = 0;
        for seed in 0..n {
            let mut seen_null = false;
            let mut g = Graph::new();
            let (_, draw) = training_loss_with(
                &mut g,
                &x0(),
                &cond,
                &null,
                &mut SeededRng::new(seed, 0),
                &s,
                COND_DROPOUT,
                |g, x, _, c, _| {
                    seen_null = c.is_null();
                    Ok(g.constant(Tensor::zeros(x.shape())))
                },
            )
            .unwrap();
            assert_eq!(seen_null, draw.dropped);
            dropped += draw.dropped as usize;
        }
        let p = dropped as f64 / n as f64;
        assert!((p - 0.1).abs() < 4.0 * (0.09 / n as f64).sqrt(), "{p}");
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let model = Model::new(
            ModelConfig::desk(Variant::DitClassConditional),
            InitScheme::Random,
            9,
        )
        .unwrap();
        let s = DiffusionSchedule::default();
        let cond = Condition::Class(Some(2));
        let eval = |m: &Model| {
            let mut g = Graph::new();
            let b = m.bind(&mut g, false);
            let (l, _) =
                training_loss(&mut g, &b, &x0(), &cond, &mut SeededRng::new(5, 0), &s).unwrap();
            g.value(l).item()
        };
        let mut g = Graph::new();
        let b = model.bind(&mut g, true);
        let (l, _) =
            training_loss(&mut g, &b, &x0(), &cond, &mut SeededRng::new(5, 0), &s).unwrap();
        g.backward(l).unwrap();
        let grads = b.grads(&g);
        let mut rng = SeededRng::new(1, 0);
        for name in [
            "blocks.1.attn_qkv_w",
            "t_embedder.0.fc1_w",
            "final.0.linear_w",
            "y_embedder.0.table",
        ] {
            let numel = model.param(name).unwrap().numel();
            for _ in 0..3 {
                let k = rng.below(numel);
                let numeric = central_difference(
                    |v| {
                        let mut m = model.clone();
                        let mut p = m.param(name).unwrap().clone();
                        p.data_mut()[k] = v[0];
                        m.set_param(name, p).unwrap();
                        eval(&m)
                    },
                    &[model.param(name).unwrap().data()[k]],
                    1e-5,
                )[0];
                let a = grads[name].data()[k];
                let rel = (a - numeric).abs() / (a.abs() + numeric.abs() + 1e-8);
                assert!(
                    rel < 1e-4 || (a - numeric).abs() < 1e-9,
                    "{name}[{k}]: {a} vs {numeric}"
                );
            }
        }
    }
}
