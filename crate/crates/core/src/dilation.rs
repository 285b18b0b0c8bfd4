//! Pitch-dependent dilation factors, per-layer dilation plans and
//! receptive-field arithmetic.

use std::fmt::Write as _;
use std::ops::Range;

use crate::codec::MULAW_LEVELS;
use crate::error::{invalid, shape, Result};

/// Which block group comes first after the causal entry layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CascadeOrder {
    #[default]
    FixedFirst,
    AdaptiveFirst,
}

impl std::str::FromStr for CascadeOrder {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fixed-first" => Ok(Self::FixedFirst),
            "adaptive-first" => Ok(Self::AdaptiveFirst),
            _ => Err(invalid(format!("unknown cascade order `{s}`"))),
        }
    }
}

impl std::fmt::Display for CascadeOrder {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::FixedFirst => "fixed-first",
            Self::AdaptiveFirst => "adaptive-first",
        })
    }
}

/// Network shape shared by WN and QPNet variants.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArchitectureSpec {
    pub fixed_layers: usize,
    pub fixed_repeats: usize,
    /// Zero for a vanilla WaveNet.
    pub adaptive_layers: usize,
    pub adaptive_repeats: usize,
    pub residual_channels: usize,
    pub skip_channels: usize,
    pub head_channels: usize,
    pub quant_levels: usize,
    /// Samples per pitch period covered at unit dilation factor.
    pub period_divisor: u32,
    pub order: CascadeOrder,
}

impl ArchitectureSpec {
    fn table(fixed: (usize, usize), adaptive: (usize, usize)) -> Self {
        Self {
            fixed_layers: fixed.0,
            fixed_repeats: fixed.1,
            adaptive_layers: adaptive.0,
            adaptive_repeats: adaptive.1,
            residual_channels: 512,
            skip_channels: 512,
            head_channels: 256,
            quant_levels: MULAW_LEVELS,
            period_divisor: 8,
            order: CascadeOrder::FixedFirst,
        }
    }

    /// Full-size WaveNet: 10 layers × 3 repeats.
    pub fn wn_full() -> Self {
        Self::table((10, 3), (0, 0))
    }

    /// Compact WaveNet: 4 layers × 4 repeats.
    pub fn wn_compact() -> Self {
        Self::table((4, 4), (0, 0))
    }

    /// QPNet: 4 × 3 fixed layers followed by 4 × 1 pitch-adaptive layers.
    pub fn qpnet() -> Self {
        Self::table((4, 3), (4, 1))
    }

    /// Small QPNet for CPU training: 3 fixed and 2 adaptive layers, 64 channels.
    pub fn desk() -> Self {
        Self {
            residual_channels: 64,
            skip_channels: 64,
            head_channels: 64,
            ..Self::table((3, 1), (2, 1))
        }
    }

    pub fn with_channels(mut self, residual: usize, skip: usize, head: usize) -> Self {
        self.residual_channels = residual;
        self.skip_channels = skip;
        self.head_channels = head;
        self
    }

    pub fn fixed_count(&self) -> usize {
        self.fixed_layers * self.fixed_repeats
    }

    pub fn adaptive_count(&self) -> usize {
        self.adaptive_layers * self.adaptive_repeats
    }

    pub fn layer_count(&self) -> usize {
        self.fixed_count() + self.adaptive_count()
    }

    pub fn is_adaptive(&self) -> bool {
        self.adaptive_count() > 0
    }

    pub fn validate(&self) -> Result<()> {
        if self.fixed_count() == 0 {
            return Err(invalid("at least one fixed layer is required"));
        }
        if (self.adaptive_layers == 0) != (self.adaptive_repeats == 0) {
            return Err(invalid("adaptive layers and repeats must both be zero or both positive"));
        }
        if self.fixed_layers > 24 || self.adaptive_layers > 24 {
            return Err(invalid("dilation doubling limited to 24 layers per cycle"));
        }
        if self.quant_levels != MULAW_LEVELS {
            return Err(invalid(format!("quantisation must use {MULAW_LEVELS} levels")));
        }
        if self.residual_channels == 0 || self.skip_channels == 0 || self.head_channels == 0 {
            return Err(invalid("channel counts must be positive"));
        }
        if self.period_divisor == 0 {
            return Err(invalid("period divisor must be at least 1"));
        }
        Ok(())
    }

    /// Layer kinds in network order.
    pub fn layers(&self) -> Vec<LayerKind> {
        let fixed = (0..self.fixed_count()).map(LayerKind::Fixed);
        let adaptive = (0..self.adaptive_count()).map(LayerKind::Adaptive);
        match self.order {
            CascadeOrder::FixedFirst => fixed.chain(adaptive).collect(),
            CascadeOrder::AdaptiveFirst => adaptive.chain(fixed).collect(),
        }
    }
}

/// A residual layer, identified by its index within its group.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Fixed(usize),
    Adaptive(usize),
}

fn round_half_up(x: f64) -> f64 {
    (x + 0.5).floor()
}

/// Dilation of adaptive layer `k` for dilation factor `e`.
pub fn adaptive_dilation(e: f64, k: usize, adaptive_layers: usize) -> u32 {
    let scaled = round_half_up(e * (1u64 << (k % adaptive_layers)) as f64);
    scaled.clamp(1.0, u32::MAX as f64) as u32
}

pub fn fixed_dilation(k: usize, fixed_layers: usize) -> u32 {
    1 << (k % fixed_layers)
}

/// `rate / (f0 · divisor)` for every sample.
pub fn pitch_dilation_factors(continuous_f0: &[f64], rate: u32, period_divisor: u32) -> Result<Vec<f64>> {
    if period_divisor == 0 {
        return Err(invalid("period divisor must be at least 1"));
    }
    if rate == 0 {
        return Err(invalid("sample rate must be positive"));
    }
    if let Some(t) = continuous_f0.iter().position(|&f| !(f > 0.0 && f.is_finite())) {
        return Err(invalid(format!(
            "F0 at sample {t} is {}; interpolate unvoiced regions first",
            continuous_f0[t]
        )));
    }
    let scale = f64::from(rate) / f64::from(period_divisor);
    Ok(continuous_f0.iter().map(|&f| scale / f).collect())
}

/// Per-layer dilation schedule for one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct DilationPlan {
    fixed: Vec<u32>,
    factors: Vec<f64>,
    /// Layer-major: `adaptive[k][t]`.
    adaptive: Vec<Vec<u32>>,
}

pub fn build_plan(spec: &ArchitectureSpec, factors: &[f64]) -> Result<DilationPlan> {
    spec.validate()?;
    if spec.is_adaptive() && factors.is_empty() {
        return Err(invalid("adaptive layers need at least one dilation factor"));
    }
    if let Some(t) = factors.iter().position(|&e| !(e > 0.0 && e.is_finite())) {
        return Err(invalid(format!("dilation factor at sample {t} is {}", factors[t])));
    }
    let fixed = (0..spec.fixed_count())
        .map(|k| fixed_dilation(k, spec.fixed_layers))
        .collect();
    let adaptive = (0..spec.adaptive_count())
        .map(|k| {
            factors
                .iter()
                .map(|&e| adaptive_dilation(e, k, spec.adaptive_layers))
                .collect()
        })
        .collect();
    Ok(DilationPlan {
        fixed,
        factors: factors.to_vec(),
        adaptive,
    })
}

/// Dependence span `r`: output `t` depends on inputs `[t - r, t]`.
pub fn receptive_field(spec: &ArchitectureSpec, constant_factor: Option<f64>) -> Result<usize> {
    spec.validate()?;
    let fixed: usize = (0..spec.fixed_count())
        .map(|k| fixed_dilation(k, spec.fixed_layers) as usize)
        .sum();
    let adaptive: usize = match (spec.is_adaptive(), constant_factor) {
        (false, None) => 0,
        (true, Some(e)) if e > 0.0 && e.is_finite() => (0..spec.adaptive_count())
            .map(|k| adaptive_dilation(e, k, spec.adaptive_layers) as usize)
            .sum(),
        (true, Some(e)) => return Err(invalid(format!("dilation factor {e} must be positive"))),
        (true, None) => return Err(invalid("adaptive layers need a constant dilation factor")),
        (false, Some(_)) => return Err(invalid("a dilation factor only applies to adaptive layers")),
    };
    Ok(1 + fixed + adaptive)
}

impl DilationPlan {
    /// Samples covered, or `None` for a purely fixed plan.
    pub fn len(&self) -> Option<usize> {
        (!self.adaptive.is_empty()).then(|| self.factors.len())
    }

    pub fn fixed_dilations(&self) -> &[u32] {
        &self.fixed
    }

    pub fn factors(&self) -> &[f64] {
        &self.factors
    }

    pub fn adaptive_layer(&self, k: usize) -> &[u32] {
        &self.adaptive[k]
    }

    pub fn adaptive_dilation(&self, t: usize, k: usize) -> u32 {
        self.adaptive[k][t]
    }

    pub fn adaptive_count(&self) -> usize {
        self.adaptive.len()
    }

    /// Largest dilation any layer uses, in network order.
    pub fn max_dilation(&self, layer: LayerKind) -> u32 {
        match layer {
            LayerKind::Fixed(k) => self.fixed[k],
            LayerKind::Adaptive(k) => self.adaptive[k].iter().copied().max().unwrap_or(1),
        }
    }

    /// Whether the plan supplies dilations for `samples` steps.
    pub fn covers(&self, samples: usize) -> Result<()> {
        match self.len() {
            Some(n) if n != samples => Err(shape(format!("plan covers {n} samples, sequence has {samples}"))),
            _ => Ok(()),
        }
    }

    pub fn slice(&self, range: Range<usize>) -> Result<Self> {
        if self.len().is_some() && range.end > self.factors.len() {
            return Err(shape(format!(
                "slice {range:?} outside plan of {} samples",
                self.factors.len()
            )));
        }
        let cut = |v: &[f64]| if v.is_empty() { Vec::new() } else { v[range.clone()].to_vec() };
        Ok(Self {
            fixed: self.fixed.clone(),
            factors: cut(&self.factors),
            adaptive: self.adaptive.iter().map(|l| l[range.clone()].to_vec()).collect(),
        })
    }

    /// Per-sample dependence span `1 + Σ dilations`.
    pub fn span_at(&self, t: usize) -> usize {
        1 + self.fixed.iter().map(|&d| d as usize).sum::<usize>()
            + self.adaptive.iter().map(|l| l[t] as usize).sum::<usize>()
    }

    /// Diagnostic text: per-layer dilations and span statistics.
    pub fn report(&self, spec: &ArchitectureSpec) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "order\t{}", spec.order);
        let _ = writeln!(out, "layer\tkind\tmin\tmean\tmax");
        for (i, layer) in spec.layers().into_iter().enumerate() {
            match layer {
                LayerKind::Fixed(k) => {
                    let d = self.fixed[k];
                    let _ = writeln!(out, "{i}\tfixed\t{d}\t{d}\t{d}");
                }
                LayerKind::Adaptive(k) => {
                    let l = &self.adaptive[k];
                    let (lo, hi) = (l.iter().min().copied().unwrap_or(0), l.iter().max().copied().unwrap_or(0));
                    let mean = l.iter().map(|&d| f64::from(d)).sum::<f64>() / l.len().max(1) as f64;
                    let _ = writeln!(out, "{i}\tadaptive\t{lo}\t{mean:.3}\t{hi}");
                }
            }
        }
        let n = self.factors.len();
        if self.adaptive.is_empty() || n == 0 {
            let _ = writeln!(out, "span\t{}", self.span_at(0));
        } else {
            let spans: Vec<usize> = (0..n).map(|t| self.span_at(t)).collect();
            let mean = spans.iter().sum::<usize>() as f64 / n as f64;
            let (lo, hi) = (spans.iter().min().unwrap(), spans.iter().max().unwrap());
            let _ = writeln!(out, "span\tmin {lo}\tmean {mean:.3}\tmax {hi}");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn dilation_factor_examples() {
        let e = pitch_dilation_factors(&[551.25, 220.5, 110.25], 22050, 8).unwrap();
        assert_eq!(e, vec![5.0, 12.5, 25.0]);
        assert!(pitch_dilation_factors(&[100.0, 0.0], 22050, 8).is_err());
        assert!(pitch_dilation_factors(&[-1.0], 22050, 8).is_err());
        assert!(pitch_dilation_factors(&[100.0], 22050, 0).is_err());
    }

    #[test]
    fn qpnet_fixed_schedule() {
        let plan = build_plan(&ArchitectureSpec::qpnet(), &[12.5]).unwrap();
        assert_eq!(plan.fixed_dilations(), &[1, 2, 4, 8, 1, 2, 4, 8, 1, 2, 4, 8]);
    }

    #[test]
    fn adaptive_schedule_rounds_half_up() {
        let plan = build_plan(&ArchitectureSpec::qpnet(), &[12.5; 3]).unwrap();
        for t in 0..3 {
            let row: Vec<u32> = (0..4).map(|k| plan.adaptive_dilation(t, k)).collect();
            // 12.5 × {1, 2, 4, 8} = 12.5, 25, 50, 100
            assert_eq!(row, vec![13, 25, 50, 100]);
        }
        let tiny = build_plan(&ArchitectureSpec::qpnet(), &[0.3]).unwrap();
        assert_eq!(tiny.adaptive_dilation(0, 0), 1);
        assert_eq!(tiny.adaptive_dilation(0, 1), 1);
        assert_eq!(tiny.adaptive_dilation(0, 2), 1);
        assert_eq!(tiny.adaptive_dilation(0, 3), 2);
    }

    #[test]
    fn closed_form_spans() {
        assert_eq!(receptive_field(&ArchitectureSpec::wn_full(), None).unwrap(), 3070);
        assert_eq!(receptive_field(&ArchitectureSpec::wn_compact(), None).unwrap(), 61);
        assert_eq!(receptive_field(&ArchitectureSpec::qpnet(), Some(5.0)).unwrap(), 121);
        assert!(receptive_field(&ArchitectureSpec::qpnet(), None).is_err());
        assert!(receptive_field(&ArchitectureSpec::wn_full(), Some(2.0)).is_err());
    }

    #[test]
    fn spec_validation() {
        let mut s = ArchitectureSpec::desk();
        assert!(s.validate().is_ok());
        s.quant_levels = 128;
        assert!(s.validate().is_err());
        let mut s = ArchitectureSpec::desk();
        s.fixed_repeats = 0;
        assert!(s.validate().is_err());
        let mut s = ArchitectureSpec::desk();
        s.adaptive_repeats = 0;
        assert!(s.validate().is_err());
        assert!(build_plan(&ArchitectureSpec::qpnet(), &[]).is_err());
        assert!(build_plan(&ArchitectureSpec::wn_compact(), &[]).is_ok());
    }

    #[test]
    fn cascade_order_switch() {
        let mut s = ArchitectureSpec::desk();
        assert_eq!(s.layers()[0], LayerKind::Fixed(0));
        s.order = CascadeOrder::AdaptiveFirst;
        assert_eq!(s.layers()[0], LayerKind::Adaptive(0));
        assert_eq!(s.layers().len(), 5);
        assert_eq!("adaptive-first".parse::<CascadeOrder>().unwrap(), s.order);
    }

    #[test]
    fn slicing_and_report() {
        let e: Vec<f64> = (0..10).map(|t| 2.0 + t as f64 * 0.25).collect();
        let spec = ArchitectureSpec::desk();
        let plan = build_plan(&spec, &e).unwrap();
        let part = plan.slice(3..7).unwrap();
        assert_eq!(part.len(), Some(4));
        assert_eq!(part.adaptive_dilation(0, 1), plan.adaptive_dilation(3, 1));
        assert!(plan.slice(5..11).is_err());
        let text = plan.report(&spec);
        assert!(text.contains("adaptive"));
        assert!(text.contains("span\tmin"));
    }

    proptest! {
        #[test]
        fn adaptive_dilations_non_decreasing_within_block(e in 1.0f64..60.0, layers in 1usize..6) {
            for k in 1..layers {
                prop_assert!(adaptive_dilation(e, k, layers) >= adaptive_dilation(e, k - 1, layers));
            }
        }

        #[test]
        fn constant_pitch_span_tracks_ideal(f0 in 60.0f64..500.0, layers in 1usize..6) {
            let spec = ArchitectureSpec {
                adaptive_layers: layers,
                adaptive_repeats: 1,
                ..ArchitectureSpec::qpnet()
            };
            let e = pitch_dilation_factors(&[f0], 22050, 8).unwrap()[0];
            let fixed_span = 1 + 3 * 15;
            let ideal = fixed_span as f64 + ((1u64 << layers) - 1) as f64 * e;
            let r = receptive_field(&spec, Some(e)).unwrap() as f64;
            // every layer rounds by at most half a sample
            prop_assert!((r - ideal).abs() <= 0.5 * layers as f64 + 1e-9);
        }

        #[test]
        fn halving_f0_doubles_factor(f0 in 40.0f64..800.0) {
            let a = pitch_dilation_factors(&[f0], 22050, 8).unwrap()[0];
            let b = pitch_dilation_factors(&[f0 / 2.0], 22050, 8).unwrap()[0];
            prop_assert!((b - 2.0 * a).abs() <= 1e-12 * b);
        }
    }
}
