//! Packed XOR/popcount inference for a trained classifier.
//!
//! Compilation binarizes and packs both weight matrices and folds the hidden
//! batchnorm + sign into one integer comparison per neuron, so inference
//! needs only XOR, popcount and integer compares.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::autodiff::{read_exact, read_u32};
use crate::binarize::{BitVector, PackedMatrix};
use crate::bnn::{argmax_lowest, BnnModel};
use crate::error::{Error, Result};

pub const PACKED_MAGIC: &[u8; 5] = b"HYBP1";

/// Integer replacement for `sign(batchnorm(s))` on a popcount score `s`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ThresholdRule {
    /// +1 iff `s >= tau` (positive slope).
    AtLeast(i32),
    /// +1 iff `s <= tau` (negative slope).
    AtMost(i32),
    /// Output independent of `s`.
    Constant(bool),
}

impl ThresholdRule {
    pub fn fires(self, s: i32) -> bool {
        match self {
            ThresholdRule::AtLeast(t) => s >= t,
            ThresholdRule::AtMost(t) => s <= t,
            ThresholdRule::Constant(c) => c,
        }
    }

    /// Integer threshold; constants report the bound that realizes them.
    pub fn tau(self) -> i32 {
        match self {
            ThresholdRule::AtLeast(t) | ThresholdRule::AtMost(t) => t,
            ThresholdRule::Constant(_) => 0,
        }
    }

    pub fn flipped(self) -> bool {
        matches!(self, ThresholdRule::AtMost(_))
    }

    // Rules whose threshold lies outside [-nbits, nbits] never change output
    // over reachable scores.
    fn normalize(self, nbits: i32) -> Self {
        match self {
            ThresholdRule::AtLeast(t) if t <= -nbits => ThresholdRule::Constant(true),
            ThresholdRule::AtLeast(t) if t > nbits => ThresholdRule::Constant(false),
            ThresholdRule::AtMost(t) if t >= nbits => ThresholdRule::Constant(true),
            ThresholdRule::AtMost(t) if t < -nbits => ThresholdRule::Constant(false),
            r => r,
        }
    }
}

/// Folds `sign(γ·(s−μ)/σ + β)` over integer `s ∈ [−nbits, nbits]` into a rule
/// that agrees with the real-valued expression (sign(0) = +1).
pub fn fold_threshold(gamma: f64, beta: f64, mean: f64, sigma: f64, nbits: u32) -> Result<ThresholdRule> {
    if !(sigma.is_finite() && sigma > 0.0) {
        return Err(Error::Degenerate(format!("batchnorm scale σ = {sigma}")));
    }
    if ![gamma, beta, mean].iter().all(|v| v.is_finite()) {
        return Err(Error::Degenerate("non-finite batchnorm parameter".into()));
    }
    let n = nbits as i32;
    if gamma == 0.0 {
        return Ok(ThresholdRule::Constant(beta >= 0.0));
    }
    let fires = |s: i32| gamma * (s as f64 - mean) / sigma + beta >= 0.0;
    let lim = (n + 2) as f64;
    let t = (mean - beta * sigma / gamma).clamp(-lim, lim);
    // γ > 0: f(s) >= 0 iff s >= t, the smallest such integer is ceil(t).
    // γ < 0: f(s) >= 0 iff s <= t, the largest such integer is floor(t).
    // Rounding in t can misplace the boundary by one; nudge until the
    // integer rule agrees with f on both sides.
    let rule = if gamma > 0.0 {
        let mut tau = t.ceil() as i32;
        while tau > -n - 1 && fires(tau - 1) {
            tau -= 1;
        }
        while tau <= n && !fires(tau) {
            tau += 1;
        }
        ThresholdRule::AtLeast(tau)
    } else {
        let mut tau = t.floor() as i32;
        while tau < n + 1 && fires(tau + 1) {
            tau += 1;
        }
        while tau >= -n && !fires(tau) {
            tau -= 1;
        }
        ThresholdRule::AtMost(tau)
    };
    Ok(rule.normalize(n))
}

/// Finds the rule reproducing a monotone predicate over `[−nbits, nbits]`.
fn fold_monotone(nbits: u32, fires: impl Fn(i32) -> bool) -> Result<ThresholdRule> {
    let n = nbits as i32;
    let bits: Vec<bool> = (-n..=n).map(&fires).collect();
    let at = |i: usize| i as i32 - n;
    let rule = match bits.iter().position(|&b| b != bits[0]) {
        None => ThresholdRule::Constant(bits[0]),
        Some(i) if !bits[0] => ThresholdRule::AtLeast(at(i)),
        Some(i) => ThresholdRule::AtMost(at(i - 1)),
    };
    if (-n..=n).any(|s| rule.fires(s) != fires(s)) {
        return Err(Error::Degenerate("batchnorm response is not monotone in the score".into()));
    }
    Ok(rule)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PackedBnnModel {
    layer1: PackedMatrix,
    rules: Vec<ThresholdRule>,
    layer2: PackedMatrix,
}

/// Packs a trained classifier.
///
/// Each hidden rule is derived from the same f32 arithmetic the dense eval
/// path uses, so the two engines agree bit for bit; the result also agrees
/// with [`fold_threshold`] except where f32 rounding lands exactly on a
/// boundary.
pub fn compile(model: &BnnModel) -> Result<PackedBnnModel> {
    for (name, w) in [("W1", model.w1()), ("W2", model.w2())] {
        if w.data().iter().all(|&v| v == 0.0) {
            return Err(Error::Degenerate(format!("{name} is all zeros")));
        }
    }
    let layer1 = PackedMatrix::from_signs(model.w1())?;
    let layer2 = PackedMatrix::from_signs(model.w2())?;
    let (gamma, beta, mean, var, eps) = model.batchnorm_params();
    let nbits = model.config.input_bits as u32;
    let mut rules = Vec::with_capacity(gamma.len());
    for j in 0..gamma.len() {
        let denom = (var[j] + eps).sqrt();
        let inv = 1.0 / denom;
        if !(denom > 0.0 && inv.is_finite() && mean[j].is_finite() && gamma[j].is_finite() && beta[j].is_finite()) {
            return Err(Error::Degenerate(format!(
                "hidden neuron {j}: variance {} mean {}",
                var[j], mean[j]
            )));
        }
        let (g, b, mu) = (gamma[j], beta[j], mean[j]);
        rules.push(fold_monotone(nbits, |s| g * ((s as f32 - mu) * inv) + b >= 0.0)?);
    }
    PackedBnnModel::new(layer1, rules, layer2)
}

impl PackedBnnModel {
    pub fn new(layer1: PackedMatrix, rules: Vec<ThresholdRule>, layer2: PackedMatrix) -> Result<Self> {
        if rules.len() != layer1.row_count() || layer2.row_bits() != layer1.row_count() {
            return Err(Error::shape(format!(
                "layer widths disagree: {} hidden rows, {} rules, layer 2 expects {} bits",
                layer1.row_count(),
                rules.len(),
                layer2.row_bits()
            )));
        }
        if layer2.row_count() < 2 {
            return Err(Error::shape("need at least two output classes"));
        }
        Ok(PackedBnnModel { layer1, rules, layer2 })
    }

    pub fn input_bits(&self) -> usize {
        self.layer1.row_bits()
    }

    pub fn hidden(&self) -> usize {
        self.layer1.row_count()
    }

    pub fn classes(&self) -> usize {
        self.layer2.row_count()
    }

    pub fn rules(&self) -> &[ThresholdRule] {
        &self.rules
    }

    pub fn layer1(&self) -> &PackedMatrix {
        &self.layer1
    }

    pub fn layer2(&self) -> &PackedMatrix {
        &self.layer2
    }

    /// Packed hidden activations for one code.
    pub fn hidden_code(&self, code: &BitVector) -> Result<BitVector> {
        let s = self.layer1.matvec(code)?;
        Ok(BitVector::from_bools(s.iter().zip(&self.rules).map(|(&s, r)| r.fires(s))))
    }

    /// Integer output scores for one code.
    pub fn scores(&self, code: &BitVector) -> Result<Vec<i32>> {
        self.layer2.matvec(&self.hidden_code(code)?)
    }

    pub fn infer(&self, code: &BitVector) -> Result<usize> {
        Ok(argmax_lowest(&self.scores(code)?))
    }

    pub fn infer_batch(&self, codes: &[BitVector]) -> Result<Vec<usize>> {
        codes.iter().map(|c| self.infer(c)).collect()
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(PACKED_MAGIC)?;
        for v in [self.input_bits(), self.hidden(), self.classes()] {
            w.write_all(&(v as u32).to_le_bytes())?;
        }
        for row in self.layer1.rows() {
            w.write_all(&row.to_bytes())?;
        }
        for rule in &self.rules {
            let tag = match rule {
                ThresholdRule::AtLeast(_) => 0u8,
                ThresholdRule::AtMost(_) => 1,
                ThresholdRule::Constant(true) => 2,
                ThresholdRule::Constant(false) => 3,
            };
            w.write_all(&[tag])?;
            w.write_all(&rule.tau().to_le_bytes())?;
        }
        for row in self.layer2.rows() {
            w.write_all(&row.to_bytes())?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut v = Vec::new();
        self.write_to(&mut v).expect("Vec write");
        v
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 5];
        read_exact(r, &mut magic, "packed model magic")?;
        if &magic != PACKED_MAGIC {
            return Err(Error::BadMagic {
                path: "<packed model>".into(),
                expected: "HYBP1".into(),
                found: String::from_utf8_lossy(&magic).into_owned(),
            });
        }
        let input = read_u32(r, "input width")? as usize;
        let hidden = read_u32(r, "hidden width")? as usize;
        let classes = read_u32(r, "class count")? as usize;
        if input == 0 || hidden == 0 || classes == 0 {
            return Err(Error::Format("packed model widths must be positive".into()));
        }
        let read_rows = |r: &mut R, rows: usize, bits: usize| -> Result<PackedMatrix> {
            let mut buf = vec![0u8; bits.div_ceil(8)];
            let mut out = Vec::with_capacity(rows);
            for _ in 0..rows {
                read_exact(r, &mut buf, "packed row")?;
                out.push(BitVector::from_bytes(bits, &buf)?);
            }
            PackedMatrix::new(bits, out)
        };
        let layer1 = read_rows(r, hidden, input)?;
        let mut rules = Vec::with_capacity(hidden);
        let mut rec = [0u8; 5];
        for _ in 0..hidden {
            read_exact(r, &mut rec, "threshold")?;
            let tau = i32::from_le_bytes(rec[1..].try_into().expect("4 bytes"));
            rules.push(match rec[0] {
                0 => ThresholdRule::AtLeast(tau),
                1 => ThresholdRule::AtMost(tau),
                2 => ThresholdRule::Constant(true),
                3 => ThresholdRule::Constant(false),
                t => return Err(Error::Format(format!("unknown threshold tag {t}"))),
            });
        }
        let layer2 = read_rows(r, classes, hidden)?;
        Self::new(layer1, rules, layer2)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let f = File::open(path.as_ref())?;
        Self::read_from(&mut BufReader::new(f))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerSize {
    pub name: String,
    pub dense_bytes: usize,
    pub packed_bytes: usize,
}

impl LayerSize {
    pub fn ratio(&self) -> f64 {
        self.dense_bytes as f64 / self.packed_bytes as f64
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SizeReport {
    pub layers: Vec<LayerSize>,
    /// One tag byte and one i32 per hidden neuron.
    pub threshold_bytes: usize,
}

impl SizeReport {
    pub fn dense_bytes(&self) -> usize {
        self.layers.iter().map(|l| l.dense_bytes).sum()
    }

    pub fn packed_bytes(&self) -> usize {
        self.layers.iter().map(|l| l.packed_bytes).sum()
    }

    pub fn weight_ratio(&self) -> f64 {
        self.dense_bytes() as f64 / self.packed_bytes() as f64
    }
}

/// Weight memory of the packed model against 32-bit dense weights.
pub fn model_size_report(packed: &PackedBnnModel, dense: &BnnModel) -> SizeReport {
    let layer = |name: &str, m: &PackedMatrix, w: &crate::Tensor| LayerSize {
        name: name.into(),
        dense_bytes: w.len() * 4,
        packed_bytes: m.payload_bytes(),
    };
    SizeReport {
        layers: vec![
            layer("W1", &packed.layer1, dense.w1()),
            layer("W2", &packed.layer2, dense.w2()),
        ],
        threshold_bytes: packed.rules.len() * 5,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bnn::{bnn_predict, BnnConfig};
    use crate::rng::stream_rng;
    use rand::Rng;

    #[test]
    fn identity_and_negated_batchnorm() {
        assert_eq!(fold_threshold(1.0, 0.0, 0.0, 1.0, 200).unwrap(), ThresholdRule::AtLeast(0));
        assert_eq!(fold_threshold(-1.0, 0.0, 0.0, 1.0, 200).unwrap(), ThresholdRule::AtMost(0));
        assert_eq!(fold_threshold(0.0, -0.5, 3.0, 1.0, 200).unwrap(), ThresholdRule::Constant(false));
        assert_eq!(fold_threshold(0.0, 0.0, 3.0, 1.0, 200).unwrap(), ThresholdRule::Constant(true));
        assert!(fold_threshold(1.0, 0.0, 0.0, 0.0, 200).is_err());
        assert_eq!(fold_threshold(1.0, 0.0, 500.0, 1.0, 200).unwrap(), ThresholdRule::Constant(false));
        assert_eq!(fold_threshold(1.0, 0.0, -500.0, 1.0, 200).unwrap(), ThresholdRule::Constant(true));
    }

    #[test]
    fn fractional_threshold_rounds_in_the_right_direction() {
        // boundary at s = 2.5
        assert_eq!(fold_threshold(2.0, -5.0, 0.0, 1.0, 10).unwrap(), ThresholdRule::AtLeast(3));
        assert_eq!(fold_threshold(-2.0, 5.0, 0.0, 1.0, 10).unwrap(), ThresholdRule::AtMost(2));
        // boundary exactly on an integer keeps it (sign(0) = +1)
        assert_eq!(fold_threshold(1.0, -4.0, 0.0, 1.0, 10).unwrap(), ThresholdRule::AtLeast(4));
        assert_eq!(fold_threshold(-1.0, 4.0, 0.0, 1.0, 10).unwrap(), ThresholdRule::AtMost(4));
    }

    #[test]
    fn monotone_fold_finds_rules() {
        assert_eq!(fold_monotone(4, |s| s >= 2).unwrap(), ThresholdRule::AtLeast(2));
        assert_eq!(fold_monotone(4, |s| s <= -1).unwrap(), ThresholdRule::AtMost(-1));
        assert_eq!(fold_monotone(4, |_| false).unwrap(), ThresholdRule::Constant(false));
        assert!(fold_monotone(4, |s| s == 0).is_err());
    }

    fn random_model(seed: u64) -> BnnModel {
        let mut m = BnnModel::new(BnnConfig { seed, ..BnnConfig::default() }).unwrap();
        let mut rng = stream_rng(seed, 7);
        let bn = m.bn;
        for v in m.store.value_mut(bn.gamma).data_mut() {
            *v = rng.gen_range(-2.0..2.0);
        }
        for v in m.store.value_mut(bn.beta).data_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        for v in m.store.value_mut(bn.running_mean).data_mut() {
            *v = rng.gen_range(-20.0..20.0);
        }
        for v in m.store.value_mut(bn.running_var).data_mut() {
            *v = rng.gen_range(1.0..300.0);
        }
        m.store.value_mut(bn.gamma).data_mut()[0] = 0.0;
        m
    }

    #[test]
    fn packed_engine_matches_dense_on_random_codes() {
        let m = random_model(11);
        let p = compile(&m).unwrap();
        let mut rng = stream_rng(1, 8);
        let codes: Vec<BitVector> = (0..500)
            .map(|_| BitVector::from_bools((0..200).map(|_| rng.gen_bool(0.5))))
            .collect();
        assert_eq!(p.infer_batch(&codes).unwrap(), bnn_predict(&m, &codes).unwrap());
        assert!(p.infer(&BitVector::zeros(199)).is_err());
    }

    #[test]
    fn size_report_is_32x() {
        let m = random_model(2);
        let r = model_size_report(&compile(&m).unwrap(), &m);
        assert_eq!(r.layers[0].dense_bytes, 102_400);
        assert_eq!(r.layers[0].packed_bytes, 3_200);
        assert_eq!(r.layers[1].dense_bytes, 1_024);
        assert_eq!(r.layers[1].packed_bytes, 32);
        assert_eq!(r.layers[0].ratio(), 32.0);
        assert_eq!(r.layers[1].ratio(), 32.0);
        assert_eq!(r.dense_bytes(), 103_424);
        assert_eq!(r.packed_bytes(), 3_232);
        assert_eq!(r.weight_ratio(), 32.0);
    }

    #[test]
    fn packed_file_round_trip() {
        let p = compile(&random_model(3)).unwrap();
        let bytes = p.to_bytes();
        assert_eq!(bytes.len(), 5 + 12 + 3200 + 128 * 5 + 32);
        assert_eq!(PackedBnnModel::read_from(&mut bytes.as_slice()).unwrap(), p);
        assert_eq!(PackedBnnModel::read_from(&mut bytes.as_slice()).unwrap().to_bytes(), bytes);
        assert!(PackedBnnModel::read_from(&mut &bytes[..bytes.len() - 3]).is_err());
    }

    #[test]
    fn all_zero_weights_rejected() {
        let mut m = random_model(4);
        let w = m.fc1.w;
        m.store.value_mut(w).data_mut().iter_mut().for_each(|v| *v = 0.0);
        assert!(compile(&m).is_err());
    }
}
