//! Ablation runner: trains and evaluates each variant of a suite under one
//! shared seed and budget, and reports a table plus direction checks.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::Serialize;
use serde_json::Value;

use crate::bridge::{BridgeConfig, Schedule};
use crate::infer::{render_sequence, ForwardModel, InferConfig, SamplerMode};
use crate::metrics::{ImageScores, MetricReport};
use crate::net::{KeyframeVariant, NetConfig, ParamGroup};
use crate::scene::Sequence;
use crate::train::{keyframe_indices, Checkpoint, LossTerms, Stage, TrainConfig, Trainer};
use crate::{Error, Result};

pub const PROXY_NOTE: &str =
    "perceptual_proxy is a deterministic stand-in for LPIPS; its values are not comparable with LPIPS scores";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Suite {
    Schedules,
    PixelLosses,
    KeyframeDesigns,
    KeyframeGaps,
    InferenceSteps,
}

impl Suite {
    pub const ALL: [Suite; 5] = [
        Suite::Schedules,
        Suite::PixelLosses,
        Suite::KeyframeDesigns,
        Suite::KeyframeGaps,
        Suite::InferenceSteps,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Suite::Schedules => "schedules",
            Suite::PixelLosses => "pixel_losses",
            Suite::KeyframeDesigns => "keyframe_designs",
            Suite::KeyframeGaps => "keyframe_gaps",
            Suite::InferenceSteps => "inference_steps",
        }
    }

    /// Row labels the suite emits, in order.
    pub fn row_labels(self, gaps: &[usize]) -> Vec<String> {
        let fixed: &[&str] = match self {
            Suite::Schedules => &[
                "Uniform SDE (4 steps)",
                "4 timesteps ODE (4 steps)",
                "4 timesteps ODE (1 step)",
                "4 timesteps SDE (4 steps)",
                "4 timesteps SDE (1 step)",
            ],
            Suite::PixelLosses => &[
                "L_latent only",
                "L_latent + L_proxy",
                "L_latent + L_proxy + L_grad",
            ],
            Suite::KeyframeDesigns => &[
                "w/o Keyframes",
                "VACE progressive",
                "Reused Query w/o ffn lora",
                "Dedicated Query w/o ffn lora",
                "Dedicated Query w/ ffn lora",
                "Ours + VACE progressive",
            ],
            Suite::KeyframeGaps => {
                let mut v = vec!["w/o keyframes".to_string()];
                v.extend(gaps.iter().map(|g| format!("{g} Gap")));
                return v;
            }
            Suite::InferenceSteps => &["1 step", "2 steps (ODE)", "4 steps (ODE)", "2 steps (SDE)", "4 steps (SDE)"],
        };
        fixed.iter().map(|s| s.to_string()).collect()
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|x| x.as_str() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = Suite::ALL.iter().map(|x| x.as_str()).collect();
                Error::invalid(format!("unknown suite `{s}` (expected one of {})", names.join(", ")))
            })
    }
}

/// Everything a suite needs besides data. `train.steps` and
/// `train.keyframe_steps` are the per-variant budget.
#[derive(Debug, Clone)]
pub struct AblationSetup {
    pub net: NetConfig,
    pub bridge: BridgeConfig,
    pub train: TrainConfig,
    pub infer: InferConfig,
    pub gaps: Vec<usize>,
}

/// Whether row `lhs` scores at least as high as row `rhs` on `metric`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DirectionCheck {
    pub lhs: String,
    pub rhs: String,
    pub metric: String,
    pub lhs_value: f64,
    pub rhs_value: f64,
    pub holds: bool,
}

impl fmt::Display for DirectionCheck {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} ({:.4}) >= {} ({:.4}) on {}: {}",
            self.lhs,
            self.lhs_value,
            self.rhs,
            self.rhs_value,
            self.metric,
            if self.holds { "holds" } else { "violated" }
        )
    }
}

#[derive(Debug, Clone)]
pub struct AblationTable {
    pub suite: Suite,
    pub report: MetricReport,
    pub checks: Vec<DirectionCheck>,
}

impl AblationTable {
    fn check(&mut self, lhs: &str, rhs: &str, metric: &str) -> Result<()> {
        let get = |label: &str| -> Result<f64> {
            self.report
                .row(label)
                .and_then(|r| r.metrics.get(metric).copied())
                .ok_or_else(|| Error::invalid(format!("row `{label}` has no `{metric}`")))
        };
        let (a, b) = (get(lhs)?, get(rhs)?);
        let c = DirectionCheck {
            lhs: lhs.into(),
            rhs: rhs.into(),
            metric: metric.into(),
            lhs_value: a,
            rhs_value: b,
            holds: a >= b,
        };
        self.report.notes.push(format!("check: {c}"));
        self.checks.push(c);
        Ok(())
    }

    fn finish(mut self) -> Result<Self> {
        self.report
            .metadata
            .insert("checks".into(), serde_json::to_value(&self.checks)?);
        Ok(self)
    }
}

fn train_base(
    setup: &AblationSetup,
    bridge: &BridgeConfig,
    loss: LossTerms,
    data: &[&Sequence],
) -> Result<(Checkpoint, String)> {
    let cfg = TrainConfig {
        stage: Stage::Base,
        loss,
        ..setup.train.clone()
    };
    let steps = cfg.steps;
    let mut t = Trainer::new(setup.net.clone(), cfg, bridge.clone())?;
    t.run(data, steps, None, None)?;
    let ck = t.checkpoint()?;
    let hash = ck.hash()?;
    Ok((ck, hash))
}

/// The base weights of `ck` under a different keyframe adapter design.
pub fn with_keyframe_design(ck: &Checkpoint, variant: KeyframeVariant, ffn_lora: bool) -> Checkpoint {
    let mut out = ck.clone();
    out.header.net.keyframe_variant = variant;
    out.header.net.keyframe_ffn_lora = ffn_lora;
    out.header.params.retain(|e| e.group != ParamGroup::KeyframeAdapter);
    out
}

fn train_keyframe(
    setup: &AblationSetup,
    base: &Checkpoint,
    base_hash: &str,
    variant: KeyframeVariant,
    ffn_lora: bool,
    data: &[&Sequence],
) -> Result<ForwardModel> {
    let ck = with_keyframe_design(base, variant, ffn_lora);
    let mut t = Trainer::keyframe_stage(&ck, base_hash, setup.train.clone())?;
    let until = t.cfg.total_steps();
    t.run(data, until, None, None)?;
    let out = t.checkpoint()?;
    let hash = out.hash()?;
    ForwardModel::from_checkpoint(&out, &hash)
}

fn model(ck: &Checkpoint, hash: &str) -> Result<ForwardModel> {
    ForwardModel::from_checkpoint(ck, hash)
}

/// Per-frame scores over every eval sequence, plus a keyframe flag per frame.
fn evaluate(
    m: &ForwardModel,
    eval: &[&Sequence],
    infer: &InferConfig,
    gap: Option<usize>,
) -> Result<(ImageScores, Vec<bool>)> {
    let mut scores = ImageScores::default();
    let mut key = Vec::new();
    let cfg = InferConfig {
        use_keyframes: gap.is_some(),
        keyframe_gap: gap.unwrap_or(infer.keyframe_gap),
        ..infer.clone()
    };
    for seq in eval {
        let idx = gap.map(|g| keyframe_indices(seq.len(), g)).unwrap_or_default();
        let r = render_sequence(m, seq, &cfg, &m.bridge, gap.map(|_| idx.as_slice()))?;
        let gt: Vec<_> = seq.frames.iter().map(|f| f.reference.clone()).collect();
        scores.extend(ImageScores::compute(&r.images, &gt)?);
        key.extend((0..seq.len()).map(|i| idx.contains(&i)));
    }
    Ok((scores, key))
}

fn infer_with(base: &InferConfig, steps: usize, mode: SamplerMode) -> InferConfig {
    InferConfig {
        steps,
        mode,
        ..base.clone()
    }
}

/// Trains and evaluates every variant of `suite`.
pub fn run_ablation(
    suite: Suite,
    setup: &AblationSetup,
    train: &[&Sequence],
    eval: &[&Sequence],
) -> Result<AblationTable> {
    if train.is_empty() || eval.is_empty() {
        return Err(Error::invalid("ablation needs non-empty train and eval splits"));
    }
    setup.net.validate()?;
    setup.bridge.validate()?;
    setup.train.validate()?;
    setup.infer.validate()?;
    let labels = suite.row_labels(&setup.gaps);
    let mut table = AblationTable {
        suite,
        report: MetricReport::new(&format!("ablation: {suite}")),
        checks: Vec::new(),
    };
    table.report.notes.push(PROXY_NOTE.into());
    let meta = &mut table.report.metadata;
    meta.insert("suite".into(), Value::String(suite.to_string()));
    meta.insert("train_seed".into(), Value::from(setup.train.seed));
    meta.insert("init_seed".into(), Value::from(setup.net.init_seed));
    meta.insert("infer_rng_seed".into(), Value::from(setup.infer.rng_seed));
    meta.insert("steps".into(), Value::from(setup.train.steps));
    meta.insert("keyframe_steps".into(), Value::from(setup.train.keyframe_steps));
    meta.insert("train_sequences".into(), Value::from(train.len()));
    meta.insert("eval_sequences".into(), Value::from(eval.len()));
    meta.insert("net".into(), serde_json::to_value(&setup.net)?);

    let mut rows: Vec<BTreeMap<String, f64>> = Vec::new();
    match suite {
        Suite::Schedules => {
            let uniform = BridgeConfig {
                schedule: Schedule::Uniform,
                ..setup.bridge.clone()
            };
            let discrete_sde = BridgeConfig {
                schedule: Schedule::Discrete4,
                ..setup.bridge.clone()
            };
            let discrete_ode = BridgeConfig {
                sigma: 0.0,
                ..discrete_sde.clone()
            };
            let (ck, h) = train_base(setup, &uniform, LossTerms::FULL, train)?;
            let mu = model(&ck, &h)?;
            let (ck, h) = train_base(setup, &discrete_ode, LossTerms::FULL, train)?;
            let mo = model(&ck, &h)?;
            let (ck, h) = train_base(setup, &discrete_sde, LossTerms::FULL, train)?;
            let ms = model(&ck, &h)?;
            let sde4 = InferConfig {
                sde_sigma: discrete_sde.sigma,
                ..infer_with(&setup.infer, 4, SamplerMode::Sde)
            };
            for (m, cfg) in [
                (&mu, sde4.clone()),
                (&mo, infer_with(&setup.infer, 4, SamplerMode::Ode)),
                (&mo, infer_with(&setup.infer, 1, SamplerMode::Ode)),
                (&ms, sde4),
                (&ms, infer_with(&setup.infer, 1, SamplerMode::Ode)),
            ] {
                rows.push(evaluate(m, eval, &cfg, None)?.0.mean());
            }
        }
        Suite::PixelLosses => {
            for terms in [LossTerms::LATENT_ONLY, LossTerms::PERCEPTUAL, LossTerms::FULL] {
                let (ck, h) = train_base(setup, &setup.bridge, terms, train)?;
                let cfg = infer_with(&setup.infer, 1, SamplerMode::Ode);
                rows.push(evaluate(&model(&ck, &h)?, eval, &cfg, None)?.0.mean());
            }
        }
        Suite::KeyframeDesigns => {
            let gap = setup.train.keyframe_gap;
            let (ck, h) = train_base(setup, &setup.bridge, LossTerms::FULL, train)?;
            let base = model(&ck, &h)?;
            let plain = InferConfig {
                progressive: false,
                ..setup.infer.clone()
            };
            let progressive = InferConfig {
                progressive: true,
                ..setup.infer.clone()
            };
            rows.push(evaluate(&base, eval, &plain, None)?.0.mean());
            rows.push(evaluate(&base, eval, &progressive, None)?.0.mean());
            let reused = train_keyframe(setup, &ck, &h, KeyframeVariant::ReusedQuery, false, train)?;
            rows.push(evaluate(&reused, eval, &plain, Some(gap))?.0.mean());
            let dedicated = train_keyframe(setup, &ck, &h, KeyframeVariant::DedicatedQuery, false, train)?;
            rows.push(evaluate(&dedicated, eval, &plain, Some(gap))?.0.mean());
            let full = train_keyframe(setup, &ck, &h, KeyframeVariant::DedicatedQuery, true, train)?;
            rows.push(evaluate(&full, eval, &plain, Some(gap))?.0.mean());
            rows.push(evaluate(&full, eval, &progressive, Some(gap))?.0.mean());
        }
        Suite::KeyframeGaps => {
            let (ck, h) = train_base(setup, &setup.bridge, LossTerms::FULL, train)?;
            let full = train_keyframe(setup, &ck, &h, KeyframeVariant::DedicatedQuery, true, train)?;
            rows.push(evaluate(&full, eval, &setup.infer, None)?.0.mean());
            for &g in &setup.gaps {
                let (scores, key) = evaluate(&full, eval, &setup.infer, Some(g))?;
                let mut m = scores.mean();
                for (k, v) in scores.mean_where(|i| !key[i]) {
                    m.insert(format!("{k}_non_keyframe"), v);
                }
                rows.push(m);
            }
            let shortest = eval.iter().map(|s| s.len()).min().unwrap_or(0);
            if let Some(&g) = setup.gaps.iter().max() {
                if shortest <= g {
                    table.report.notes.push(format!(
                        "eval sequences have {shortest} frames; gaps of {g} or more place a single keyframe"
                    ));
                }
            }
        }
        Suite::InferenceSteps => {
            let (ck, h) = train_base(setup, &setup.bridge, LossTerms::FULL, train)?;
            let m = model(&ck, &h)?;
            let sde = |steps| InferConfig {
                sde_sigma: setup.bridge.sigma,
                ..infer_with(&setup.infer, steps, SamplerMode::Sde)
            };
            for cfg in [
                infer_with(&setup.infer, 1, SamplerMode::Ode),
                infer_with(&setup.infer, 2, SamplerMode::Ode),
                infer_with(&setup.infer, 4, SamplerMode::Ode),
                sde(2),
                sde(4),
            ] {
                rows.push(evaluate(&m, eval, &cfg, None)?.0.mean());
            }
        }
    }
    for (label, m) in labels.iter().zip(rows) {
        table.report.push(label, m);
    }
    match suite {
        Suite::Schedules => {
            table.check("4 timesteps SDE (1 step)", "4 timesteps SDE (4 steps)", "psnr")?;
            table.check("4 timesteps SDE (1 step)", "Uniform SDE (4 steps)", "psnr")?;
            table.check("4 timesteps ODE (1 step)", "4 timesteps ODE (4 steps)", "psnr")?;
        }
        Suite::PixelLosses => {
            table.check("L_latent + L_proxy + L_grad", "L_latent only", "psnr")?;
            table.check("L_latent + L_proxy", "L_latent only", "psnr")?;
        }
        Suite::KeyframeDesigns => {
            table.check("Dedicated Query w/ ffn lora", "Reused Query w/o ffn lora", "psnr")?;
            table.check("Dedicated Query w/ ffn lora", "w/o Keyframes", "psnr")?;
            table.check("Ours + VACE progressive", "VACE progressive", "psnr")?;
        }
        Suite::KeyframeGaps => {
            for l in &labels[1..] {
                table.check(l, "w/o keyframes", "psnr")?;
            }
            for w in labels[1..].windows(2) {
                table.check(&w[0], &w[1], "psnr")?;
            }
        }
        Suite::InferenceSteps => {
            table.check("1 step", "4 steps (ODE)", "psnr")?;
        }
    }
    table.finish()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{synth_sequence, SynthConfig};

    #[test]
    fn suite_names_round_trip() {
        for s in Suite::ALL {
            assert_eq!(s.as_str().parse::<Suite>().unwrap(), s);
        }
        assert!("tables".parse::<Suite>().is_err());
    }

    #[test]
    fn row_labels_are_stable() {
        assert_eq!(Suite::KeyframeDesigns.row_labels(&[]).len(), 6);
        assert_eq!(Suite::Schedules.row_labels(&[])[0], "Uniform SDE (4 steps)");
        assert_eq!(
            Suite::KeyframeGaps.row_labels(&[13, 17, 25, 49]),
            vec!["w/o keyframes", "13 Gap", "17 Gap", "25 Gap", "49 Gap"]
        );
    }

    #[test]
    fn keyframe_design_swap_keeps_base_weights() {
        let net = NetConfig {
            patch: 4,
            dim: 16,
            depth: 1,
            heads: 2,
            ffn_mult: 2.0,
            height: 16,
            width: 16,
            env_height: 8,
            env_width: 16,
            env_patch: 4,
            ..Default::default()
        };
        let t = Trainer::new(net, TrainConfig::default(), BridgeConfig::default()).unwrap();
        let ck = t.checkpoint().unwrap();
        let swapped = with_keyframe_design(&ck, KeyframeVariant::DedicatedQuery, true);
        let built = swapped.build_net(candle_core::DType::F32, &candle_core::Device::Cpu).unwrap();
        assert!(built.params().iter().any(|p| p.name.contains("kf_lora")));
        assert!(built.params().iter().any(|p| p.name.contains("kf_q")));
        let a: Vec<f32> = t.net.store().get("head.weight").unwrap().var.flatten_all().unwrap().to_vec1().unwrap();
        let b: Vec<f32> = built.store().get("head.weight").unwrap().var.flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn tiny_inference_steps_suite() {
        let synth = SynthConfig {
            frames: 3,
            height: 16,
            width: 16,
            env_height: 8,
            env_width: 16,
            ..Default::default()
        };
        let seqs: Vec<Sequence> = (0..2).map(|i| synth_sequence(i, &synth).unwrap()).collect();
        let setup = AblationSetup {
            net: NetConfig {
                patch: 4,
                dim: 16,
                depth: 1,
                heads: 2,
                ffn_mult: 2.0,
                height: 16,
                width: 16,
                env_height: 8,
                env_width: 16,
                env_patch: 4,
                ..Default::default()
            },
            bridge: BridgeConfig::default(),
            train: TrainConfig {
                steps: 2,
                batch: 1,
                clip_frames: 2,
                ..Default::default()
            },
            infer: InferConfig {
                chunk_frames: 2,
                ..Default::default()
            },
            gaps: vec![2],
        };
        let t = run_ablation(Suite::InferenceSteps, &setup, &[&seqs[0]], &[&seqs[1]]).unwrap();
        assert_eq!(t.report.rows.len(), 5);
        assert_eq!(t.checks.len(), 1);
        assert!(t.report.notes.iter().any(|n| n.contains("LPIPS")));
        assert!(t.report.to_text().contains("2 steps (SDE)"));
    }
}
