//! Synthetic data generation from ground-truth chains, framewise training,
//! evaluation metrics, and checkpoint persistence.
//!
//! The synthetic task: `H` independent two-state chains each drive one
//! column of an orthonormal mixing matrix, `x_t = M c_t + noise * eta_t`,
//! where `c_t[i]` is `+gain` while unit i's feature is present and `-gain`
//! while absent, and `eta_t` is standard normal. Because the columns of `M`
//! are orthonormal and the noise isotropic, the likelihood ratio each unit
//! needs depends only on the projection onto its own column, so the per-unit
//! Gaussian emission models returned by [`SyntheticSpec::unit_emission_model`]
//! are exact and the classical smoother on them is the Bayes optimum.
//!
//! The class label of a frame is the state of chain 0; everything else is a
//! distractor. Training minimizes mean framewise cross-entropy (mean over
//! timesteps, then mean over the sequences of a batch).

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Result, UbruError};
use crate::grad::{backprop_with_workspace, param_count, GradientBundle};
use crate::layer::{
    log_softmax_rows, stack_forward, AffineHead, BackwardMode, LayerConfig, StackLayer, UbruParams,
};
use crate::numerics::{logit, Tensor2};
use crate::oracle::{
    params_from_gaussian, scaled_forward_backward, ChainSpec, EmissionLikelihoods,
    GaussianEmissionModel,
};

pub const CHECKPOINT_VERSION: u32 = 1;

/// Defaults of the synthetic task; `DEFAULT_NOISE` is tuned so the exact
/// smoother scores roughly 85-95% framewise on the default chains.
pub const DEFAULT_GAIN: f64 = 1.0;
pub const DEFAULT_NOISE: f64 = 1.3;
pub const DEFAULT_TAU11: f64 = 0.9;
pub const DEFAULT_TAU01: f64 = 0.1;
pub const DEFAULT_RHO0: f64 = 0.5;

/// SplitMix64 step, used to derive independent per-sequence and per-trial
/// seeds from a master seed.
pub fn derive_seed(master: u64, stream: u64) -> u64 {
    let mut z = master.wrapping_add(stream.wrapping_add(1).wrapping_mul(0x9e3779b97f4a7c15));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

// ---------------------------------------------------------------------------
// Synthetic data
// ---------------------------------------------------------------------------

/// Full description of a synthetic dataset; the seed determines every byte.
#[derive(Debug, Clone)]
pub struct SyntheticSpec {
    pub num_units: usize,
    pub feature_dim: usize,
    pub chains: Vec<ChainSpec>,
    pub gain: f64,
    pub noise: f64,
    pub seq_len: usize,
    pub num_seqs: usize,
    pub seed: u64,
}

impl SyntheticSpec {
    /// All units share one (tau11, tau01, rho0) triple.
    pub fn homogeneous(
        num_units: usize,
        feature_dim: usize,
        tau11: f64,
        tau01: f64,
        rho0: f64,
        noise: f64,
        seq_len: usize,
        num_seqs: usize,
        seed: u64,
    ) -> Result<Self> {
        let chain = ChainSpec::new(rho0, tau11, tau01)?;
        let spec = SyntheticSpec {
            num_units,
            feature_dim,
            chains: vec![chain; num_units],
            gain: DEFAULT_GAIN,
            noise,
            seq_len,
            num_seqs,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_units == 0 || self.seq_len == 0 || self.num_seqs == 0 {
            return Err(UbruError::Dimension(
                "num_units, seq_len and num_seqs must all be >= 1".into(),
            ));
        }
        if self.feature_dim < self.num_units {
            return Err(UbruError::Dimension(format!(
                "feature_dim {} must be >= num_units {} for orthogonal mixing",
                self.feature_dim, self.num_units
            )));
        }
        if self.chains.len() != self.num_units {
            return Err(UbruError::Dimension(format!(
                "{} chains for {} units",
                self.chains.len(),
                self.num_units
            )));
        }
        if !self.noise.is_finite() || self.noise <= 0.0 || !self.gain.is_finite() {
            return Err(UbruError::Domain(
                "noise must be positive and finite".into(),
            ));
        }
        Ok(())
    }

    /// Orthonormal mixing columns: `M[f][i] = c_i cos(pi (f + 1/2) i / F)`
    /// with `c_0 = sqrt(1/F)` and `c_i = sqrt(2/F)` otherwise (the DCT-II
    /// basis), so distinct units occupy orthogonal feature directions.
    pub fn mixing_matrix(&self) -> Tensor2 {
        let (f_dim, h) = (self.feature_dim, self.num_units);
        let mut m = Tensor2::zeros(f_dim, h);
        for i in 0..h {
            let scale = if i == 0 {
                (1.0 / f_dim as f64).sqrt()
            } else {
                (2.0 / f_dim as f64).sqrt()
            };
            for f in 0..f_dim {
                let angle = std::f64::consts::PI * (f as f64 + 0.5) * i as f64 / f_dim as f64;
                m.set(f, i, scale * angle.cos());
            }
        }
        m
    }

    /// Exact per-unit emission model: present mean `+gain * M_i`, absent
    /// mean `-gain * M_i`, shared covariance `noise^2 I`.
    pub fn unit_emission_model(&self, unit: usize) -> Result<GaussianEmissionModel> {
        if unit >= self.num_units {
            return Err(UbruError::Dimension(format!(
                "unit {unit} out of range (H = {})",
                self.num_units
            )));
        }
        let m = self.mixing_matrix();
        let f_dim = self.feature_dim;
        let mu: Vec<f64> = (0..f_dim).map(|f| self.gain * m.get(f, unit)).collect();
        let nu: Vec<f64> = mu.iter().map(|v| -v).collect();
        let mut sigma = Tensor2::zeros(f_dim, f_dim);
        for f in 0..f_dim {
            sigma.set(f, f, self.noise * self.noise);
        }
        GaussianEmissionModel::new(mu, nu, sigma)
    }
}

/// One labeled sequence: observations `x` (`F x T`), optional per-frame
/// class ids, optional per-frame binary state matrix (`T x H`).
#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    pub x: Tensor2,
    pub labels: Option<Vec<usize>>,
    pub states: Option<Tensor2>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub sequences: Vec<Sequence>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn total_frames(&self) -> usize {
        self.sequences.iter().map(|s| s.x.cols()).sum()
    }

    /// Write as JSON lines, one object per sequence:
    /// `{"x": [[f64; F]; T], "y": [id; T]?, "states": [[0|1; H]; T]?}`.
    /// Floats carry 17 significant digits, so files are byte-reproducible
    /// and parse back bit-exactly.
    pub fn save_jsonl(&self, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        for seq in &self.sequences {
            let t_len = seq.x.cols();
            let record = SequenceRecord {
                x: (0..t_len)
                    .map(|t| (0..seq.x.rows()).map(|f| seq.x.get(f, t)).collect())
                    .collect(),
                y: seq.labels.clone(),
                states: seq.states.as_ref().map(|s| {
                    (0..s.rows())
                        .map(|t| (0..s.cols()).map(|i| s.get(t, i) as u8).collect())
                        .collect()
                }),
            };
            out.write_all(to_json_17(&record)?.as_bytes())?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn load_jsonl(path: &Path) -> Result<Self> {
        let reader = BufReader::new(File::open(path)?);
        let mut sequences = Vec::new();
        for (line_no, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let record: SequenceRecord = serde_json::from_str(&line)
                .map_err(|e| UbruError::MalformedFile(format!("line {}: {e}", line_no + 1)))?;
            let t_len = record.x.len();
            let f_dim = record.x.first().map_or(0, Vec::len);
            if t_len == 0 || f_dim == 0 {
                return Err(UbruError::MalformedFile(format!(
                    "line {}: empty sequence",
                    line_no + 1
                )));
            }
            let mut x = Tensor2::zeros(f_dim, t_len);
            for (t, row) in record.x.iter().enumerate() {
                if row.len() != f_dim {
                    return Err(UbruError::MalformedFile(format!(
                        "line {}: ragged x rows",
                        line_no + 1
                    )));
                }
                for (f, v) in row.iter().enumerate() {
                    if !v.is_finite() {
                        return Err(UbruError::NonFinite(format!(
                            "line {}: x[{t}][{f}]",
                            line_no + 1
                        )));
                    }
                    x.set(f, t, *v);
                }
            }
            if let Some(y) = &record.y {
                if y.len() != t_len {
                    return Err(UbruError::Dimension(format!(
                        "line {}: {} labels for {} frames",
                        line_no + 1,
                        y.len(),
                        t_len
                    )));
                }
            }
            let states = match &record.states {
                None => None,
                Some(rows) => {
                    if rows.len() != t_len {
                        return Err(UbruError::Dimension(format!(
                            "line {}: {} state rows for {} frames",
                            line_no + 1,
                            rows.len(),
                            t_len
                        )));
                    }
                    let h = rows.first().map_or(0, Vec::len);
                    let mut s = Tensor2::zeros(t_len, h);
                    for (t, row) in rows.iter().enumerate() {
                        if row.len() != h {
                            return Err(UbruError::MalformedFile(format!(
                                "line {}: ragged state rows",
                                line_no + 1
                            )));
                        }
                        for (i, v) in row.iter().enumerate() {
                            if *v > 1 {
                                return Err(UbruError::MalformedFile(format!(
                                    "line {}: state entry {v} not 0/1",
                                    line_no + 1
                                )));
                            }
                            s.set(t, i, *v as f64);
                        }
                    }
                    Some(s)
                }
            };
            sequences.push(Sequence {
                x,
                labels: record.y,
                states,
            });
        }
        Ok(Dataset { sequences })
    }
}

#[derive(Serialize, Deserialize)]
struct SequenceRecord {
    x: Vec<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    y: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    states: Option<Vec<Vec<u8>>>,
}

/// Sample a dataset. Per sequence, each unit draws its initial state from
/// rho0, evolves by its transition probabilities, and the frame observation
/// is the mixed unit code plus isotropic Gaussian noise. Labels are chain
/// 0's states; the full binary state matrix is kept as well.
pub fn generate(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let m = spec.mixing_matrix();
    let (f_dim, h, t_len) = (spec.feature_dim, spec.num_units, spec.seq_len);

    let mut sequences = Vec::with_capacity(spec.num_seqs);
    for s in 0..spec.num_seqs {
        let mut rng = StdRng::seed_from_u64(derive_seed(spec.seed, s as u64));
        let mut present: Vec<bool> = spec
            .chains
            .iter()
            .map(|c| rng.gen::<f64>() < c.rho0.value())
            .collect();

        let mut x = Tensor2::zeros(f_dim, t_len);
        let mut states = Tensor2::zeros(t_len, h);
        let mut labels = Vec::with_capacity(t_len);
        for t in 0..t_len {
            for (i, chain) in spec.chains.iter().enumerate() {
                let stay = if present[i] {
                    chain.tau11.value()
                } else {
                    chain.tau01.value()
                };
                present[i] = rng.gen::<f64>() < stay;
                states.set(t, i, if present[i] { 1.0 } else { 0.0 });
            }
            labels.push(if states.get(t, 0) == 1.0 { 1 } else { 0 });
            for f in 0..f_dim {
                let mut v = 0.0;
                for i in 0..h {
                    let code = if states.get(t, i) == 1.0 {
                        spec.gain
                    } else {
                        -spec.gain
                    };
                    v += m.get(f, i) * code;
                }
                v += spec.noise * rng.sample::<f64, _>(StandardNormal);
                x.set(f, t, v);
            }
        }
        sequences.push(Sequence {
            x,
            labels: Some(labels),
            states: Some(states),
        });
    }
    Ok(Dataset { sequences })
}

// ---------------------------------------------------------------------------
// Training configuration and checkpoints
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub layers: Vec<LayerConfig>,
    pub num_classes: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: Optimizer,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(UbruError::Dimension("no layers configured".into()));
        }
        for pair in self.layers.windows(2) {
            if pair[1].input_dim != pair[0].output_dim() {
                return Err(UbruError::Dimension(format!(
                    "layer chain broken: {} outputs feed {} inputs",
                    pair[0].output_dim(),
                    pair[1].input_dim
                )));
            }
        }
        if self.num_classes < 2 {
            return Err(UbruError::Dimension("need at least 2 classes".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(UbruError::Domain(
                "epochs and batch_size must be >= 1".into(),
            ));
        }
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(UbruError::Domain(format!(
                "learning rate {} must be finite and >= 0",
                self.learning_rate
            )));
        }
        Ok(())
    }

    pub fn head_input_dim(&self) -> usize {
        self.layers.last().map_or(0, LayerConfig::output_dim)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainMeta {
    pub epochs_trained: usize,
    pub final_loss: f64,
    pub loss_history: Vec<f64>,
}

/// A trained (or constructed) model: the config echo, one parameter set per
/// direction per layer (forward first, then reverse for bidirectional
/// layers), the head, and training metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub config: TrainConfig,
    pub layers: Vec<UbruParams>,
    pub head: AffineHead,
    pub meta: TrainMeta,
}

impl Checkpoint {
    /// Reassemble the runnable stack, consuming one or two parameter sets
    /// per configured layer.
    pub fn to_stack(&self) -> Result<Vec<StackLayer>> {
        let mut iter = self.layers.iter();
        let mut stack = Vec::with_capacity(self.config.layers.len());
        for cfg in &self.config.layers {
            let fwd = iter
                .next()
                .ok_or_else(|| UbruError::ShapeInconsistency("missing layer params".into()))?
                .clone();
            let rev = if cfg.bidirectional {
                Some(
                    iter.next()
                        .ok_or_else(|| {
                            UbruError::ShapeInconsistency("missing reverse params".into())
                        })?
                        .clone(),
                )
            } else {
                None
            };
            let layer = StackLayer {
                config: *cfg,
                fwd,
                rev,
            };
            layer.validate().map_err(|e| {
                UbruError::ShapeInconsistency(format!("layer params vs config: {e}"))
            })?;
            stack.push(layer);
        }
        if iter.next().is_some() {
            return Err(UbruError::ShapeInconsistency(
                "more parameter sets than configured layers".into(),
            ));
        }
        if self.head.input_dim() != self.config.head_input_dim()
            || self.head.num_classes() != self.config.num_classes
        {
            return Err(UbruError::ShapeInconsistency(format!(
                "head is {}x{}, config wants {}x{}",
                self.head.input_dim(),
                self.head.num_classes(),
                self.config.head_input_dim(),
                self.config.num_classes
            )));
        }
        Ok(stack)
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    version: u32,
    config: TrainConfig,
    layers: Vec<LayerParamsFile>,
    head: HeadFile,
    meta: TrainMeta,
}

#[derive(Serialize, Deserialize)]
struct LayerParamsFile {
    #[serde(rename = "W")]
    w: Vec<f64>,
    b: Vec<f64>,
    u_tau11: Vec<f64>,
    u_tau01: Vec<f64>,
    u_rho0: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct HeadFile {
    #[serde(rename = "W")]
    w: Vec<f64>,
    b: Vec<f64>,
}

/// Write a checkpoint as one JSON object. Floats are printed with 17
/// significant digits, which f64 parsing recovers bit-exactly.
pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let file = CheckpointFile {
        version: ckpt.version,
        config: ckpt.config.clone(),
        layers: ckpt
            .layers
            .iter()
            .map(|p| LayerParamsFile {
                w: p.w().data().to_vec(),
                b: p.b().to_vec(),
                u_tau11: p.u_tau11().to_vec(),
                u_tau01: p.u_tau01().to_vec(),
                u_rho0: p.u_rho0().to_vec(),
            })
            .collect(),
        head: HeadFile {
            w: ckpt.head.weights().data().to_vec(),
            b: ckpt.head.bias().to_vec(),
        },
        meta: ckpt.meta.clone(),
    };
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(to_json_17(&file)?.as_bytes())?;
    out.write_all(b"\n")?;
    out.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut text = String::new();
    File::open(path)?.read_to_string(&mut text)?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| UbruError::MalformedFile(format!("{e}")))?;
    let version = value
        .get("version")
        .and_then(serde_json::Value::as_u64)
        .ok_or_else(|| UbruError::MalformedFile("missing version field".into()))?
        as u32;
    if version != CHECKPOINT_VERSION {
        return Err(UbruError::VersionMismatch {
            found: version,
            supported: CHECKPOINT_VERSION,
        });
    }
    let file: CheckpointFile =
        serde_json::from_value(value).map_err(|e| UbruError::MalformedFile(format!("{e}")))?;
    file.config.validate()?;

    // Parameter sets appear forward-first, reverse second for bidirectional
    // layers; shapes come from the config echo.
    let mut expected_shapes = Vec::new();
    for cfg in &file.config.layers {
        expected_shapes.push((cfg.input_dim, cfg.hidden_dim));
        if cfg.bidirectional {
            expected_shapes.push((cfg.input_dim, cfg.hidden_dim));
        }
    }
    if file.layers.len() != expected_shapes.len() {
        return Err(UbruError::ShapeInconsistency(format!(
            "{} parameter sets for {} expected",
            file.layers.len(),
            expected_shapes.len()
        )));
    }
    let mut layers = Vec::with_capacity(file.layers.len());
    for (entry, (f_dim, h_dim)) in file.layers.into_iter().zip(expected_shapes) {
        if entry.w.len() != f_dim * h_dim {
            return Err(UbruError::ShapeInconsistency(format!(
                "W has {} entries, expected {}x{}",
                entry.w.len(),
                f_dim,
                h_dim
            )));
        }
        for (name, v) in [
            ("b", &entry.b),
            ("u_tau11", &entry.u_tau11),
            ("u_tau01", &entry.u_tau01),
            ("u_rho0", &entry.u_rho0),
        ] {
            if v.len() != h_dim {
                return Err(UbruError::ShapeInconsistency(format!(
                    "{name} has {} entries, expected {h_dim}",
                    v.len()
                )));
            }
        }
        let w = Tensor2::from_vec(f_dim, h_dim, entry.w)?;
        layers.push(UbruParams::new(
            w,
            entry.b,
            entry.u_tau11,
            entry.u_tau01,
            entry.u_rho0,
        )?);
    }

    let head_in = file.config.head_input_dim();
    let classes = file.config.num_classes;
    if file.head.w.len() != head_in * classes || file.head.b.len() != classes {
        return Err(UbruError::ShapeInconsistency(format!(
            "head W has {} entries and b {}, expected {}x{} and {}",
            file.head.w.len(),
            file.head.b.len(),
            head_in,
            classes,
            classes
        )));
    }
    let head = AffineHead::new(
        Tensor2::from_vec(head_in, classes, file.head.w)?,
        file.head.b,
    )?;

    let ckpt = Checkpoint {
        version,
        config: file.config,
        layers,
        head,
        meta: file.meta,
    };
    ckpt.to_stack()?;
    Ok(ckpt)
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

/// Fan-based uniform init for weight matrices; transition and initial logits
/// start at zero (all probabilities 0.5), biases at zero.
fn init_checkpoint(cfg: &TrainConfig) -> Checkpoint {
    let mut rng = StdRng::seed_from_u64(cfg.seed);
    let draw_matrix = |f: usize, h: usize, rng: &mut StdRng| {
        let k = (6.0 / (f + h) as f64).sqrt();
        Tensor2::from_vec(f, h, (0..f * h).map(|_| rng.gen_range(-k..k)).collect())
            .expect("finite by construction")
    };
    let mut layers = Vec::new();
    for lc in &cfg.layers {
        let directions = if lc.bidirectional { 2 } else { 1 };
        for _ in 0..directions {
            let w = draw_matrix(lc.input_dim, lc.hidden_dim, &mut rng);
            layers.push(
                UbruParams::new(
                    w,
                    vec![0.0; lc.hidden_dim],
                    vec![0.0; lc.hidden_dim],
                    vec![0.0; lc.hidden_dim],
                    vec![0.0; lc.hidden_dim],
                )
                .expect("shapes consistent"),
            );
        }
    }
    let head_w = draw_matrix(cfg.head_input_dim(), cfg.num_classes, &mut rng);
    let head = AffineHead::new(head_w, vec![0.0; cfg.num_classes]).expect("shapes consistent");
    Checkpoint {
        version: CHECKPOINT_VERSION,
        config: cfg.clone(),
        layers,
        head,
        meta: TrainMeta::default(),
    }
}

/// Gradients of one sequence for every layer direction (in checkpoint
/// parameter-set order) and the head.
struct StackGrads {
    layer_grads: Vec<GradientBundle>,
    head_w: Tensor2,
    head_b: Vec<f64>,
}

impl StackGrads {
    fn zeros(stack: &[StackLayer], head: &AffineHead) -> Self {
        let mut layer_grads = Vec::new();
        for layer in stack {
            layer_grads.push(GradientBundle::zeros_like(&layer.fwd));
            if let Some(rev) = &layer.rev {
                layer_grads.push(GradientBundle::zeros_like(rev));
            }
        }
        StackGrads {
            layer_grads,
            head_w: Tensor2::zeros(head.input_dim(), head.num_classes()),
            head_b: vec![0.0; head.num_classes()],
        }
    }

    fn accumulate(&mut self, other: &StackGrads, scale: f64) {
        for (dst, src) in self.layer_grads.iter_mut().zip(&other.layer_grads) {
            dst.accumulate(src, scale);
        }
        for (a, b) in self.head_w.data_mut().iter_mut().zip(other.head_w.data()) {
            *a += b * scale;
        }
        for (a, b) in self.head_b.iter_mut().zip(&other.head_b) {
            *a += b * scale;
        }
    }
}

/// Forward pass storing per-layer inputs, then cross-entropy loss and full
/// reverse sweep through head and layers.
fn sequence_loss_and_grads(
    stack: &[StackLayer],
    head: &AffineHead,
    x: &Tensor2,
    labels: &[usize],
) -> Result<(f64, StackGrads)> {
    let t_len = x.cols();
    if labels.len() != t_len {
        return Err(UbruError::Dimension(format!(
            "{} labels for {} frames",
            labels.len(),
            t_len
        )));
    }

    // Forward, keeping each layer's input (F_l x T).
    let mut inputs: Vec<Tensor2> = Vec::with_capacity(stack.len());
    let mut current = x.clone();
    for layer in stack {
        inputs.push(current.clone());
        current = layer.run(&current)?.transpose();
    }
    let features = current.transpose(); // T x H_out
    let mut logp = head.logits(&features)?;
    log_softmax_rows(&mut logp);

    let classes = head.num_classes();
    let mut loss = 0.0;
    let mut dlogits = Tensor2::zeros(t_len, classes);
    let inv_t = 1.0 / t_len as f64;
    for t in 0..t_len {
        let y = labels[t];
        if y >= classes {
            return Err(UbruError::Domain(format!(
                "label {y} out of range for {classes} classes"
            )));
        }
        loss -= logp.get(t, y) * inv_t;
        for c in 0..classes {
            let softmax = logp.get(t, c).exp();
            let indicator = if c == y { 1.0 } else { 0.0 };
            dlogits.set(t, c, (softmax - indicator) * inv_t);
        }
    }

    // Head adjoints.
    let mut head_w = Tensor2::zeros(head.input_dim(), classes);
    let mut head_b = vec![0.0; classes];
    let mut dfeatures = Tensor2::zeros(t_len, head.input_dim());
    for t in 0..t_len {
        for c in 0..classes {
            let d = dlogits.get(t, c);
            head_b[c] += d;
            for h in 0..head.input_dim() {
                head_w.set(h, c, head_w.get(h, c) + features.get(t, h) * d);
                dfeatures.set(t, h, dfeatures.get(t, h) + head.weights().get(h, c) * d);
            }
        }
    }

    // Layer adjoints, last to first, chaining dL/dX.
    let mut layer_grads: Vec<GradientBundle> = Vec::new();
    let mut dout = dfeatures; // T x out_dim of current layer
    for (layer, input) in stack.iter().zip(&inputs).rev() {
        let h = layer.config.hidden_dim;
        if layer.config.bidirectional {
            let t_rows = dout.rows();
            let mut dfwd = Tensor2::zeros(t_rows, h);
            let mut drev_rev = Tensor2::zeros(t_rows, h);
            for t in 0..t_rows {
                for i in 0..h {
                    dfwd.set(t, i, dout.get(t, i));
                    // Second block row t came from the reversed pass row T-1-t.
                    drev_rev.set(t_rows - 1 - t, i, dout.get(t, h + i));
                }
            }
            let (gf, wf) =
                backprop_with_workspace(&layer.fwd, input, layer.config.backward_mode, &dfwd)?;
            let rev = layer.rev.as_ref().expect("validated");
            let (gr, wr) = backprop_with_workspace(
                rev,
                &input.reversed_cols(),
                layer.config.backward_mode,
                &drev_rev,
            )?;
            let mut dx = wf.input_adj().clone();
            let dx_rev = wr.input_adj().reversed_cols();
            for (a, b) in dx.data_mut().iter_mut().zip(dx_rev.data()) {
                *a += b;
            }
            // Checkpoint order is forward then reverse; we fill reversed.
            layer_grads.push(gr);
            layer_grads.push(gf);
            dout = dx.transpose();
        } else {
            let (g, ws) =
                backprop_with_workspace(&layer.fwd, input, layer.config.backward_mode, &dout)?;
            layer_grads.push(g);
            dout = ws.input_adj().transpose();
        }
    }
    layer_grads.reverse();

    Ok((
        loss,
        StackGrads {
            layer_grads,
            head_w,
            head_b,
        },
    ))
}

/// Mean framewise cross-entropy over a dataset: mean over timesteps, then
/// mean over sequences. This is the training objective and the quantity
/// reported by [`evaluate`].
pub fn mean_cross_entropy(stack: &[StackLayer], head: &AffineHead, data: &Dataset) -> Result<f64> {
    let mut total = 0.0;
    for seq in &data.sequences {
        let labels = seq
            .labels
            .as_ref()
            .ok_or_else(|| UbruError::Domain("sequence has no labels".into()))?;
        let logp = stack_forward(stack, head, &seq.x)?;
        if labels.len() != logp.rows() {
            return Err(UbruError::Dimension(format!(
                "{} labels for {} frames",
                labels.len(),
                logp.rows()
            )));
        }
        let mut seq_loss = 0.0;
        for (t, &y) in labels.iter().enumerate() {
            if y >= head.num_classes() {
                return Err(UbruError::Domain(format!(
                    "label {y} out of range for {} classes",
                    head.num_classes()
                )));
            }
            seq_loss -= logp.get(t, y);
        }
        total += seq_loss / labels.len() as f64;
    }
    Ok(total / data.len() as f64)
}

/// Flat first/second-moment buffers for the optional Adam optimizer.
struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    m_head: Vec<f64>,
    v_head: Vec<f64>,
    step: usize,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl AdamState {
    fn new(layers: &[UbruParams], head: &AffineHead) -> Self {
        AdamState {
            m: layers.iter().map(|p| vec![0.0; param_count(p)]).collect(),
            v: layers.iter().map(|p| vec![0.0; param_count(p)]).collect(),
            m_head: vec![0.0; head.weights().data().len() + head.bias().len()],
            v_head: vec![0.0; head.weights().data().len() + head.bias().len()],
            step: 0,
        }
    }
}

/// Visit every scalar of a parameter set in slot order (w row-major, b,
/// u_tau11, u_tau01, u_rho0 — the same order as `GradientBundle::component`).
fn for_each_param_scalar(params: &mut UbruParams, mut f: impl FnMut(usize, &mut f64)) {
    let (w, b, u11, u01, ur) = params.fields_mut();
    let mut slot = 0;
    for v in w.data_mut() {
        f(slot, v);
        slot += 1;
    }
    for field in [b, u11, u01, ur] {
        for v in field.iter_mut() {
            f(slot, v);
            slot += 1;
        }
    }
}

fn for_each_head_scalar(head: &mut AffineHead, mut f: impl FnMut(usize, &mut f64)) {
    let (w, b) = head.fields_mut();
    let mut slot = 0;
    for v in w.data_mut() {
        f(slot, v);
        slot += 1;
    }
    for v in b.iter_mut() {
        f(slot, v);
        slot += 1;
    }
}

fn adam_update(theta: &mut f64, g: f64, m: &mut f64, v: &mut f64, lr: f64, step: usize) {
    *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
    *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
    let m_hat = *m / (1.0 - ADAM_BETA1.powi(step as i32));
    let v_hat = *v / (1.0 - ADAM_BETA2.powi(step as i32));
    *theta -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
}

/// Train a fresh model on `data`; see [`train_model_with_progress`].
pub fn train_model(cfg: &TrainConfig, data: &Dataset) -> Result<Checkpoint> {
    train_model_with_progress(cfg, data, |_, _| {})
}

/// Deterministic training loop: sequences are visited in dataset order in
/// consecutive batches (no shuffling), per-batch gradients are the mean of
/// per-sequence gradients accumulated in batch-index order, and the final
/// loss is a clean full pass with the trained parameters (so evaluating on
/// the training data reproduces it exactly). `on_epoch` receives
/// `(epoch_number, mean_epoch_loss)` after every epoch.
pub fn train_model_with_progress(
    cfg: &TrainConfig,
    data: &Dataset,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<Checkpoint> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(UbruError::Dimension("empty training dataset".into()));
    }
    for seq in &data.sequences {
        if seq.x.rows() != cfg.layers[0].input_dim {
            return Err(UbruError::Dimension(format!(
                "sequence has {} features, config expects {}",
                seq.x.rows(),
                cfg.layers[0].input_dim
            )));
        }
        if seq.labels.is_none() {
            return Err(UbruError::Domain("training data must carry labels".into()));
        }
    }

    let mut ckpt = init_checkpoint(cfg);
    let mut adam = AdamState::new(&ckpt.layers, &ckpt.head);
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        let mut epoch_loss = 0.0;
        let mut start = 0;
        while start < data.len() {
            let end = (start + cfg.batch_size).min(data.len());
            let stack = ckpt.to_stack()?;
            let mut batch = StackGrads::zeros(&stack, &ckpt.head);
            let scale = 1.0 / (end - start) as f64;
            for seq in &data.sequences[start..end] {
                let labels = seq.labels.as_ref().expect("checked above");
                let (loss, grads) = sequence_loss_and_grads(&stack, &ckpt.head, &seq.x, labels)?;
                if !loss.is_finite() {
                    return Err(UbruError::NonFiniteLoss { epoch });
                }
                epoch_loss += loss;
                batch.accumulate(&grads, scale);
            }

            match cfg.optimizer {
                Optimizer::Sgd => {
                    for (params, grads) in ckpt.layers.iter_mut().zip(&batch.layer_grads) {
                        for_each_param_scalar(params, |slot, theta| {
                            *theta -= cfg.learning_rate * grads.component(slot);
                        });
                    }
                    let head_grads: Vec<f64> = batch
                        .head_w
                        .data()
                        .iter()
                        .chain(&batch.head_b)
                        .copied()
                        .collect();
                    for_each_head_scalar(&mut ckpt.head, |slot, theta| {
                        *theta -= cfg.learning_rate * head_grads[slot];
                    });
                }
                Optimizer::Adam => {
                    adam.step += 1;
                    let step = adam.step;
                    for (k, (params, grads)) in
                        ckpt.layers.iter_mut().zip(&batch.layer_grads).enumerate()
                    {
                        let (m, v) = (&mut adam.m[k], &mut adam.v[k]);
                        for_each_param_scalar(params, |slot, theta| {
                            adam_update(
                                theta,
                                grads.component(slot),
                                &mut m[slot],
                                &mut v[slot],
                                cfg.learning_rate,
                                step,
                            );
                        });
                    }
                    let head_grads: Vec<f64> = batch
                        .head_w
                        .data()
                        .iter()
                        .chain(&batch.head_b)
                        .copied()
                        .collect();
                    let (mh, vh) = (&mut adam.m_head, &mut adam.v_head);
                    for_each_head_scalar(&mut ckpt.head, |slot, theta| {
                        adam_update(
                            theta,
                            head_grads[slot],
                            &mut mh[slot],
                            &mut vh[slot],
                            cfg.learning_rate,
                            step,
                        );
                    });
                }
            }
            start = end;
        }
        let mean_loss = epoch_loss / data.len() as f64;
        history.push(mean_loss);
        on_epoch(epoch, mean_loss);
    }

    let stack = ckpt.to_stack()?;
    let final_loss = mean_cross_entropy(&stack, &ckpt.head, data)?;
    ckpt.meta = TrainMeta {
        epochs_trained: cfg.epochs,
        final_loss,
        loss_history: history,
    };
    Ok(ckpt)
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct EvalMetrics {
    pub frames: usize,
    pub correct: usize,
    pub accuracy: f64,
    pub mean_cross_entropy: f64,
    /// `confusion[true_class][predicted_class]` counts.
    pub confusion: Vec<Vec<usize>>,
}

/// Framewise accuracy, mean cross-entropy (same reduction as training), and
/// per-class confusion counts of a checkpoint on labeled data.
pub fn evaluate(ckpt: &Checkpoint, data: &Dataset) -> Result<EvalMetrics> {
    if data.is_empty() {
        return Err(UbruError::Dimension("empty evaluation dataset".into()));
    }
    let stack = ckpt.to_stack()?;
    let classes = ckpt.head.num_classes();
    let mut frames = 0usize;
    let mut correct = 0usize;
    let mut confusion = vec![vec![0usize; classes]; classes];

    for seq in &data.sequences {
        let labels = seq
            .labels
            .as_ref()
            .ok_or_else(|| UbruError::Domain("sequence has no labels".into()))?;
        let logp = stack_forward(&stack, &ckpt.head, &seq.x)?;
        if labels.len() != logp.rows() {
            return Err(UbruError::Dimension(format!(
                "{} labels for {} frames",
                labels.len(),
                logp.rows()
            )));
        }
        for (t, &y) in labels.iter().enumerate() {
            if y >= classes {
                return Err(UbruError::Domain(format!(
                    "label {y} out of range for {classes} classes"
                )));
            }
            let pred = argmax_row(logp.row(t));
            frames += 1;
            if pred == y {
                correct += 1;
            }
            confusion[y][pred] += 1;
        }
    }
    let mean_ce = mean_cross_entropy(&stack, &ckpt.head, data)?;
    Ok(EvalMetrics {
        frames,
        correct,
        accuracy: correct as f64 / frames as f64,
        mean_cross_entropy: mean_ce,
        confusion,
    })
}

/// First index of the strictly largest entry.
fn argmax_row(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

// ---------------------------------------------------------------------------
// Experiment helpers
// ---------------------------------------------------------------------------

/// The default synthetic task: 4 units sharing persistent transitions
/// (tau11 = 0.9, tau01 = 0.1), 8 features, unit gain, default noise.
pub fn default_synthetic_spec(seed: u64, num_seqs: usize, seq_len: usize) -> SyntheticSpec {
    SyntheticSpec::homogeneous(
        4,
        8,
        DEFAULT_TAU11,
        DEFAULT_TAU01,
        DEFAULT_RHO0,
        DEFAULT_NOISE,
        seq_len,
        num_seqs,
        seed,
    )
    .expect("defaults are valid")
}

/// The default training recipe for the synthetic task.
pub fn default_train_config(mode: BackwardMode, seed: u64) -> TrainConfig {
    TrainConfig {
        layers: vec![LayerConfig {
            input_dim: 8,
            hidden_dim: 4,
            bidirectional: false,
            backward_mode: mode,
        }],
        num_classes: 2,
        learning_rate: 0.5,
        epochs: 40,
        batch_size: 10,
        seed,
        optimizer: Optimizer::Sgd,
    }
}

/// Build a model directly from the generating distribution: per-unit
/// feedforward parameters from the Gaussian emission models, true
/// transition/initial logits, and a head that thresholds unit 0's posterior
/// at 1/2 (the same decision rule as the exact smoother).
pub fn ground_truth_checkpoint(spec: &SyntheticSpec, mode: BackwardMode) -> Result<Checkpoint> {
    spec.validate()?;
    let (f_dim, h) = (spec.feature_dim, spec.num_units);
    let mut w = Tensor2::zeros(f_dim, h);
    let mut b = vec![0.0; h];
    for i in 0..h {
        let model = spec.unit_emission_model(i)?;
        let (w_col, b_i) = params_from_gaussian(&model);
        for f in 0..f_dim {
            w.set(f, i, w_col[f]);
        }
        b[i] = b_i;
    }
    let u_tau11: Vec<f64> = spec.chains.iter().map(|c| logit(c.tau11)).collect();
    let u_tau01: Vec<f64> = spec.chains.iter().map(|c| logit(c.tau01)).collect();
    let u_rho0: Vec<f64> = spec.chains.iter().map(|c| logit(c.rho0)).collect();
    let params = UbruParams::new(w, b, u_tau11, u_tau01, u_rho0)?;

    let kappa = 8.0;
    let mut head_w = Tensor2::zeros(h, 2);
    head_w.set(0, 0, -kappa);
    head_w.set(0, 1, kappa);
    let head = AffineHead::new(head_w, vec![kappa / 2.0, -kappa / 2.0])?;

    let config = TrainConfig {
        layers: vec![LayerConfig {
            input_dim: f_dim,
            hidden_dim: h,
            bidirectional: false,
            backward_mode: mode,
        }],
        num_classes: 2,
        learning_rate: 0.0,
        epochs: 1,
        batch_size: 1,
        seed: spec.seed,
        optimizer: Optimizer::Sgd,
    };
    Ok(Checkpoint {
        version: CHECKPOINT_VERSION,
        config,
        layers: vec![params],
        head,
        meta: TrainMeta::default(),
    })
}

/// Accuracy of the exact per-unit smoother (or filter) on chain 0's states,
/// thresholding the classical forward-backward posterior at 1/2. This is the
/// Bayes-optimal framewise accuracy for the synthetic task.
pub fn oracle_posterior_accuracy(
    spec: &SyntheticSpec,
    data: &Dataset,
    smoothed: bool,
) -> Result<f64> {
    let model = spec.unit_emission_model(0)?;
    let chain = spec.chains[0];
    let mut frames = 0usize;
    let mut correct = 0usize;
    for seq in data.sequences.iter() {
        let labels = seq
            .labels
            .as_ref()
            .ok_or_else(|| UbruError::Domain("sequence has no labels".into()))?;
        let t_len = seq.x.cols();
        let mut b1 = Vec::with_capacity(t_len);
        let mut b2 = Vec::with_capacity(t_len);
        for t in 0..t_len {
            let x: Vec<f64> = (0..seq.x.rows()).map(|f| seq.x.get(f, t)).collect();
            b1.push(model.log_density(&x, true).exp());
            b2.push(model.log_density(&x, false).exp());
        }
        let emis = EmissionLikelihoods::new(b1, b2)?;
        let (filtered, smoothed_post) = scaled_forward_backward(&chain, &emis)?;
        let posterior = if smoothed { &smoothed_post } else { &filtered };
        for (t, &y) in labels.iter().enumerate() {
            let pred = usize::from(posterior[t] > 0.5);
            frames += 1;
            if pred == y {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / frames as f64)
}

// ---------------------------------------------------------------------------
// JSON formatting with reproducible floats
// ---------------------------------------------------------------------------

struct SigDigits17;

impl serde_json::ser::Formatter for SigDigits17 {
    fn write_f64<W>(&mut self, writer: &mut W, value: f64) -> io::Result<()>
    where
        W: ?Sized + io::Write,
    {
        // 17 significant digits always round-trip a finite f64 exactly.
        write!(writer, "{value:.16e}")
    }
}

fn to_json_17<T: Serialize>(value: &T) -> Result<String> {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, SigDigits17);
    value
        .serialize(&mut ser)
        .map_err(|e| UbruError::MalformedFile(format!("serialize: {e}")))?;
    String::from_utf8(buf).map_err(|e| UbruError::MalformedFile(format!("utf8: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::PROB_EPS;

    fn tiny_spec(seed: u64) -> SyntheticSpec {
        SyntheticSpec::homogeneous(2, 3, 0.9, 0.1, 0.5, 1.5, 12, 6, seed).unwrap()
    }

    #[test]
    fn mixing_matrix_columns_are_orthonormal() {
        let spec = default_synthetic_spec(1, 1, 1);
        let m = spec.mixing_matrix();
        for i in 0..spec.num_units {
            for j in 0..spec.num_units {
                let dot: f64 = (0..spec.feature_dim)
                    .map(|f| m.get(f, i) * m.get(f, j))
                    .sum();
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((dot - expect).abs() < 1e-12, "columns {i},{j}: {dot}");
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = tiny_spec(99);
        let a = generate(&spec).unwrap();
        let b = generate(&spec).unwrap();
        assert_eq!(a, b);
        let other = generate(&tiny_spec(100)).unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn frozen_chain_generates_constant_states() {
        let spec = SyntheticSpec::homogeneous(1, 1, 1.0 - PROB_EPS, PROB_EPS, 0.5, 1.0, 50, 20, 7)
            .unwrap();
        let data = generate(&spec).unwrap();
        for seq in &data.sequences {
            let states = seq.states.as_ref().unwrap();
            let first = states.get(0, 0);
            for t in 1..states.rows() {
                assert_eq!(states.get(t, 0), first);
            }
        }
    }

    #[test]
    fn empirical_transition_frequencies_match_spec() {
        // One long chain; the 1->1 and 0->1 frequencies must land within
        // 3 sigma binomial bounds of tau11 and tau01.
        let spec = SyntheticSpec::homogeneous(1, 1, 0.85, 0.25, 0.5, 1.0, 100_000, 1, 31).unwrap();
        let data = generate(&spec).unwrap();
        let states = data.sequences[0].states.as_ref().unwrap();
        let (mut n1, mut n11, mut n0, mut n01) = (0u64, 0u64, 0u64, 0u64);
        for t in 1..states.rows() {
            let prev = states.get(t - 1, 0) == 1.0;
            let cur = states.get(t, 0) == 1.0;
            if prev {
                n1 += 1;
                n11 += u64::from(cur);
            } else {
                n0 += 1;
                n01 += u64::from(cur);
            }
        }
        let p11 = n11 as f64 / n1 as f64;
        let p01 = n01 as f64 / n0 as f64;
        let sd11 = (0.85 * 0.15 / n1 as f64).sqrt();
        let sd01 = (0.25 * 0.75 / n0 as f64).sqrt();
        assert!((p11 - 0.85).abs() < 3.0 * sd11, "p11 {p11}");
        assert!((p01 - 0.25).abs() < 3.0 * sd01, "p01 {p01}");
    }

    #[test]
    fn dataset_round_trips_through_jsonl() {
        let dir = std::env::temp_dir().join(format!("ubru-test-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("data.jsonl");
        let data = generate(&tiny_spec(5)).unwrap();
        data.save_jsonl(&path).unwrap();
        let loaded = Dataset::load_jsonl(&path).unwrap();
        assert_eq!(data, loaded);
        // Saving the loaded copy reproduces the file byte for byte.
        let path2 = dir.join("data2.jsonl");
        loaded.save_jsonl(&path2).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&path2).unwrap()
        );
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let data = generate(&tiny_spec(11)).unwrap();
        let mut cfg = TrainConfig {
            layers: vec![LayerConfig {
                input_dim: 3,
                hidden_dim: 2,
                bidirectional: false,
                backward_mode: BackwardMode::Kalman,
            }],
            num_classes: 2,
            learning_rate: 0.0,
            epochs: 3,
            batch_size: 2,
            seed: 4,
            optimizer: Optimizer::Sgd,
        };
        let trained = train_model(&cfg, &data).unwrap();
        let init = init_checkpoint(&cfg);
        assert_eq!(trained.layers, init.layers);
        assert_eq!(trained.head, init.head);
        // Adam with lr = 0 must also hold still.
        cfg.optimizer = Optimizer::Adam;
        let trained_adam = train_model(&cfg, &data).unwrap();
        assert_eq!(trained_adam.layers, init.layers);
    }

    #[test]
    fn training_is_deterministic() {
        let data = generate(&tiny_spec(21)).unwrap();
        let cfg = TrainConfig {
            layers: vec![LayerConfig {
                input_dim: 3,
                hidden_dim: 2,
                bidirectional: false,
                backward_mode: BackwardMode::Kalman,
            }],
            num_classes: 2,
            learning_rate: 0.2,
            epochs: 4,
            batch_size: 3,
            seed: 8,
            optimizer: Optimizer::Sgd,
        };
        let a = train_model(&cfg, &data).unwrap();
        let b = train_model(&cfg, &data).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn separable_task_trains_to_low_loss() {
        // Single-unit, low-noise task: loss should fall below 0.1 nats.
        let spec = SyntheticSpec::homogeneous(1, 1, 0.9, 0.1, 0.5, 0.4, 30, 8, 13).unwrap();
        let data = generate(&spec).unwrap();
        let cfg = TrainConfig {
            layers: vec![LayerConfig {
                input_dim: 1,
                hidden_dim: 1,
                bidirectional: false,
                backward_mode: BackwardMode::Kalman,
            }],
            num_classes: 2,
            learning_rate: 0.5,
            epochs: 200,
            batch_size: 8,
            seed: 3,
            optimizer: Optimizer::Sgd,
        };
        let ckpt = train_model(&cfg, &data).unwrap();
        assert!(
            ckpt.meta.final_loss < 0.1,
            "final loss {} should be < 0.1 nats",
            ckpt.meta.final_loss
        );
    }

    #[test]
    fn evaluate_on_training_data_reproduces_final_loss() {
        let data = generate(&tiny_spec(33)).unwrap();
        let cfg = TrainConfig {
            layers: vec![LayerConfig {
                input_dim: 3,
                hidden_dim: 2,
                bidirectional: false,
                backward_mode: BackwardMode::None,
            }],
            num_classes: 2,
            learning_rate: 0.3,
            epochs: 5,
            batch_size: 2,
            seed: 17,
            optimizer: Optimizer::Adam,
        };
        let ckpt = train_model(&cfg, &data).unwrap();
        let metrics = evaluate(&ckpt, &data).unwrap();
        assert!((metrics.mean_cross_entropy - ckpt.meta.final_loss).abs() < 1e-12);
        assert_eq!(metrics.frames, data.total_frames());
        let confusion_total: usize = metrics.confusion.iter().flatten().sum();
        assert_eq!(confusion_total, metrics.frames);
    }

    #[test]
    fn random_model_on_balanced_task_is_near_chance() {
        // rho0 = tau01 = 1 - tau11 = 0.5 makes labels a fair coin; a model
        // with random parameters must sit within 3 sigma of 50%.
        let spec = SyntheticSpec::homogeneous(2, 3, 0.5, 0.5, 0.5, 1.0, 50, 40, 19).unwrap();
        let data = generate(&spec).unwrap();
        let cfg = TrainConfig {
            layers: vec![LayerConfig {
                input_dim: 3,
                hidden_dim: 2,
                bidirectional: false,
                backward_mode: BackwardMode::Kalman,
            }],
            num_classes: 2,
            learning_rate: 0.1,
            epochs: 1,
            batch_size: 8,
            seed: 23,
            optimizer: Optimizer::Sgd,
        };
        let random_model = init_checkpoint(&cfg);
        let metrics = evaluate(&random_model, &data).unwrap();
        let n = metrics.frames as f64;
        let sigma = (0.25 / n).sqrt();
        assert!(
            (metrics.accuracy - 0.5).abs() < 3.0 * sigma,
            "accuracy {} too far from chance",
            metrics.accuracy
        );
    }

    #[test]
    fn checkpoint_round_trips_bit_exactly() {
        let data = generate(&tiny_spec(44)).unwrap();
        let cfg = TrainConfig {
            layers: vec![LayerConfig {
                input_dim: 3,
                hidden_dim: 2,
                bidirectional: true,
                backward_mode: BackwardMode::Kalman,
            }],
            num_classes: 2,
            learning_rate: 0.25,
            epochs: 2,
            batch_size: 2,
            seed: 5,
            optimizer: Optimizer::Adam,
        };
        let ckpt = train_model(&cfg, &data).unwrap();

        let dir = std::env::temp_dir().join(format!("ubru-ckpt-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("model.json");
        save_checkpoint(&ckpt, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(ckpt, loaded);
        let path2 = dir.join("model2.json");
        save_checkpoint(&loaded, &path2).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&path2).unwrap()
        );
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn checkpoint_file_errors_are_distinct() {
        let dir = std::env::temp_dir().join(format!("ubru-ckpt-err-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("model.json");
        let data = generate(&tiny_spec(50)).unwrap();
        let cfg = TrainConfig {
            layers: vec![LayerConfig {
                input_dim: 3,
                hidden_dim: 2,
                bidirectional: false,
                backward_mode: BackwardMode::None,
            }],
            num_classes: 2,
            learning_rate: 0.1,
            epochs: 1,
            batch_size: 2,
            seed: 2,
            optimizer: Optimizer::Sgd,
        };
        let ckpt = train_model(&cfg, &data).unwrap();
        save_checkpoint(&ckpt, &path).unwrap();

        // Truncation -> malformed, no partial state.
        let text = std::fs::read_to_string(&path).unwrap();
        std::fs::write(&path, &text[..text.len() / 2]).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(UbruError::MalformedFile(_))
        ));

        // Version bump -> version mismatch naming both versions.
        let bumped = text.replace("\"version\":1", "\"version\":2");
        assert_ne!(bumped, text);
        std::fs::write(&path, &bumped).unwrap();
        match load_checkpoint(&path) {
            Err(UbruError::VersionMismatch { found, supported }) => {
                assert_eq!(found, 2);
                assert_eq!(supported, 1);
            }
            other => panic!("expected VersionMismatch, got {other:?}"),
        }

        // Shape corruption -> shape inconsistency.
        let mut truncated_w = ckpt.clone();
        truncated_w.config.layers[0].hidden_dim = 3;
        save_checkpoint(&truncated_w, &path).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(UbruError::ShapeInconsistency(_))
        ));
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn stack_gradients_match_finite_differences() {
        // Full-model gradient check covering the bidirectional time
        // reversal and the layer-to-layer input chaining: perturb every
        // scalar parameter of a 2-layer stack (bidirectional first layer)
        // and compare the batch loss slope against the analytic gradients.
        let spec = SyntheticSpec::homogeneous(2, 3, 0.8, 0.2, 0.5, 1.0, 7, 2, 61).unwrap();
        let data = generate(&spec).unwrap();
        let cfg = TrainConfig {
            layers: vec![
                LayerConfig {
                    input_dim: 3,
                    hidden_dim: 2,
                    bidirectional: true,
                    backward_mode: BackwardMode::Kalman,
                },
                LayerConfig {
                    input_dim: 4,
                    hidden_dim: 2,
                    bidirectional: false,
                    backward_mode: BackwardMode::None,
                },
            ],
            num_classes: 2,
            learning_rate: 0.1,
            epochs: 1,
            batch_size: 2,
            seed: 29,
            optimizer: Optimizer::Sgd,
        };
        let ckpt = init_checkpoint(&cfg);
        let stack = ckpt.to_stack().unwrap();

        let batch_loss = |c: &Checkpoint| {
            let stack = c.to_stack().unwrap();
            mean_cross_entropy(&stack, &c.head, &data).unwrap()
        };
        let mut analytic = StackGrads::zeros(&stack, &ckpt.head);
        for seq in &data.sequences {
            let (_, g) =
                sequence_loss_and_grads(&stack, &ckpt.head, &seq.x, seq.labels.as_ref().unwrap())
                    .unwrap();
            analytic.accumulate(&g, 1.0 / data.len() as f64);
        }

        let h = 1e-6;
        let tol = |a: f64, b: f64| (a - b).abs() < 1e-6 + 1e-4 * a.abs().max(b.abs());
        for (set_idx, grads) in analytic.layer_grads.iter().enumerate() {
            for slot in 0..param_count(&ckpt.layers[set_idx]) {
                let mut up = ckpt.clone();
                for_each_param_scalar(&mut up.layers[set_idx], |s, v| {
                    if s == slot {
                        *v += h;
                    }
                });
                let mut down = ckpt.clone();
                for_each_param_scalar(&mut down.layers[set_idx], |s, v| {
                    if s == slot {
                        *v -= h;
                    }
                });
                let numeric = (batch_loss(&up) - batch_loss(&down)) / (2.0 * h);
                let a = grads.component(slot);
                assert!(
                    tol(a, numeric),
                    "set {set_idx} slot {slot}: analytic {a} vs fd {numeric}"
                );
            }
        }
        let head_grads: Vec<f64> = analytic
            .head_w
            .data()
            .iter()
            .chain(&analytic.head_b)
            .copied()
            .collect();
        for slot in 0..head_grads.len() {
            let mut up = ckpt.clone();
            for_each_head_scalar(&mut up.head, |s, v| {
                if s == slot {
                    *v += h;
                }
            });
            let mut down = ckpt.clone();
            for_each_head_scalar(&mut down.head, |s, v| {
                if s == slot {
                    *v -= h;
                }
            });
            let numeric = (batch_loss(&up) - batch_loss(&down)) / (2.0 * h);
            assert!(
                tol(head_grads[slot], numeric),
                "head slot {slot}: analytic {} vs fd {numeric}",
                head_grads[slot]
            );
        }
    }

    #[test]
    fn ground_truth_model_matches_exact_smoother() {
        let spec = default_synthetic_spec(77, 20, 50);
        let data = generate(&spec).unwrap();
        let ckpt = ground_truth_checkpoint(&spec, BackwardMode::Kalman).unwrap();
        let metrics = evaluate(&ckpt, &data).unwrap();
        let oracle = oracle_posterior_accuracy(&spec, &data, true).unwrap();
        assert!(
            (metrics.accuracy - oracle).abs() < 0.005,
            "model {} vs oracle {oracle}",
            metrics.accuracy
        );
    }

    #[test]
    fn config_validation_catches_bad_chains() {
        let cfg = TrainConfig {
            layers: vec![
                LayerConfig {
                    input_dim: 3,
                    hidden_dim: 2,
                    bidirectional: true,
                    backward_mode: BackwardMode::Kalman,
                },
                LayerConfig {
                    input_dim: 3, // should be 4 (2H of the bidirectional layer)
                    hidden_dim: 2,
                    bidirectional: false,
                    backward_mode: BackwardMode::Kalman,
                },
            ],
            num_classes: 2,
            learning_rate: 0.1,
            epochs: 1,
            batch_size: 1,
            seed: 0,
            optimizer: Optimizer::Sgd,
        };
        assert!(cfg.validate().is_err());
    }
}
