use crate::model::ModelConfig;

/// Round `v` up to the next multiple of `m`.
pub(crate) fn ceil_mult(v: usize, m: usize) -> usize {
    v.div_ceil(m) * m
}

/// Padding plan of one depth level.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StagePlan {
    /// Feature dims holding real content at this level.
    pub valid: (usize, usize),
    /// Dims the feature is padded to while blocks run (window multiple at
    /// levels 1..4; equal to `valid` at the bottleneck in per-stage mode).
    pub padded: (usize, usize),
    /// Even-padded dims of the valid region just before pixel-unshuffle
    /// (levels 1..4 only; tracked separately from window padding).
    pub pre_down_even: (usize, usize),
}

impl StagePlan {
    /// (bottom, right) window-padding amounts.
    pub fn pad(&self) -> (usize, usize) {
        (self.padded.0 - self.valid.0, self.padded.1 - self.valid.1)
    }

    pub fn has_padding(&self) -> bool {
        self.padded != self.valid
    }

    /// Row-major keep mask over the padded dims marking the valid region.
    pub fn validity_map(&self) -> Vec<bool> {
        let (hp, wp) = self.padded;
        let (h, w) = self.valid;
        let mut m = vec![false; hp * wp];
        for y in 0..h {
            for x in 0..w {
                m[y * wp + x] = true;
            }
        }
        m
    }

    pub fn valid_count(&self) -> usize {
        self.valid.0 * self.valid.1
    }
}

/// Per-level padding amounts and the final output crop for running the
/// network on an arbitrary input size. Encoder and decoder stages at the same
/// depth share a level's plan.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PadPlan {
    pub levels: [StagePlan; 5],
    /// Original input size; the restored image is cropped back to this.
    pub input: (usize, usize),
    pub window: usize,
}

fn valid_chain(h: usize, w: usize) -> [(usize, usize); 5] {
    let mut dims = [(0usize, 0usize); 5];
    let (mut ch, mut cw) = (h, w);
    for d in dims.iter_mut() {
        *d = (ch, cw);
        ch = ceil_mult(ch, 2) / 2;
        cw = ceil_mult(cw, 2) / 2;
    }
    dims
}

/// Per-stage plan: every level is padded to the least window multiple that
/// fits its valid content; the bottleneck has no window constraint.
pub fn plan_padding(h: usize, w: usize, config: &ModelConfig) -> PadPlan {
    assert!(h >= 1 && w >= 1, "input dims must be positive");
    let ws = config.window_size;
    let valid = valid_chain(h, w);
    let levels = std::array::from_fn(|i| {
        let v = valid[i];
        let padded = if i < 4 {
            (ceil_mult(v.0, ws), ceil_mult(v.1, ws))
        } else {
            v
        };
        StagePlan {
            valid: v,
            padded,
            pre_down_even: (ceil_mult(v.0, 2), ceil_mult(v.1, 2)),
        }
    });
    PadPlan {
        levels,
        input: (h, w),
        window: ws,
    }
}

/// Baseline plan: the input is zero-padded once to a multiple of
/// window * 2^4 (128 for window 8), so every level's padded extent is the
/// halving chain of that size. Valid regions are unchanged, which makes this
/// directly comparable against [`plan_padding`].
pub fn plan_input_padded(h: usize, w: usize, config: &ModelConfig) -> PadPlan {
    assert!(h >= 1 && w >= 1, "input dims must be positive");
    let ws = config.window_size;
    let full = ws << 4;
    let (hp, wp) = (ceil_mult(h, full), ceil_mult(w, full));
    let valid = valid_chain(h, w);
    let levels = std::array::from_fn(|i| StagePlan {
        valid: valid[i],
        padded: (hp >> i, wp >> i),
        pre_down_even: (ceil_mult(valid[i].0, 2), ceil_mult(valid[i].1, 2)),
    });
    PadPlan {
        levels,
        input: (h, w),
        window: ws,
    }
}

impl PadPlan {
    /// True when no level needs any padding (input already divisible all the
    /// way down).
    pub fn is_trivial(&self) -> bool {
        self.levels
            .iter()
            .all(|s| !s.has_padding() && s.pre_down_even == s.valid)
    }

    pub fn stage(&self, level: usize) -> &StagePlan {
        &self.levels[level - 1]
    }

    /// Padded spatial dims per level, in the order the paper reports them.
    pub fn stage_dims(&self) -> [(usize, usize); 5] {
        std::array::from_fn(|i| self.levels[i].padded)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Step-by-step simulation oracle: explicitly walk halving + padding.
    fn simulate(h: usize, w: usize, ws: usize) -> Vec<(usize, usize)> {
        let mut dims = Vec::new();
        let (mut ch, mut cw) = (h, w);
        for level in 1..=5 {
            let padded = if level < 5 {
                (ceil_mult(ch, ws), ceil_mult(cw, ws))
            } else {
                (ch, cw)
            };
            dims.push(padded);
            // Crop back to valid, make even, halve.
            ch = ceil_mult(ch, 2) / 2;
            cw = ceil_mult(cw, 2) / 2;
        }
        dims
    }

    #[test]
    fn paper_worked_example_16x16() {
        let plan = plan_padding(16, 16, &ModelConfig::nano());
        assert_eq!(
            plan.stage_dims(),
            [(16, 16), (8, 8), (8, 8), (8, 8), (1, 1)]
        );
        // Valid content shrinks by halving: 16, 8, 4, 2, 1.
        assert_eq!(
            plan.levels.map(|s| s.valid),
            [(16, 16), (8, 8), (4, 4), (2, 2), (1, 1)]
        );
    }

    #[test]
    fn multiples_of_128_need_no_padding() {
        for &(h, w) in &[(128, 128), (256, 128), (128, 384)] {
            let plan = plan_padding(h, w, &ModelConfig::nano());
            assert!(plan.is_trivial(), "{h}x{w} should be trivial");
        }
    }

    #[test]
    fn odd_input_matches_step_simulation() {
        let cfg = ModelConfig::nano();
        for &(h, w) in &[(17, 23), (1, 1), (100, 100), (5, 160), (63, 64)] {
            let plan = plan_padding(h, w, &cfg);
            let want = simulate(h, w, cfg.window_size);
            assert_eq!(plan.stage_dims().to_vec(), want, "{h}x{w}");
        }
    }

    #[test]
    fn planning_padded_dims_adds_no_first_level_padding() {
        let cfg = ModelConfig::nano();
        for &(h, w) in &[(17, 23), (9, 100), (31, 2)] {
            let plan = plan_padding(h, w, &cfg);
            let (hp, wp) = plan.stage(1).padded;
            let replan = plan_padding(hp, wp, &cfg);
            assert_eq!(replan.stage(1).pad(), (0, 0));
        }
    }

    #[test]
    fn baseline_extents_dominate_per_stage_extents() {
        let cfg = ModelConfig::nano();
        for h in 1..=140 {
            let a = plan_padding(h, 37, &cfg);
            let b = plan_input_padded(h, 37, &cfg);
            for level in 1..=5 {
                assert!(a.stage(level).padded.0 <= b.stage(level).padded.0);
                assert!(a.stage(level).padded.1 <= b.stage(level).padded.1);
                assert_eq!(a.stage(level).valid, b.stage(level).valid);
            }
        }
    }

    #[test]
    fn validity_map_marks_exactly_the_valid_region() {
        let plan = plan_padding(12, 12, &ModelConfig::nano());
        // Level 3: valid 3x3 inside padded 8x8.
        let s = plan.stage(3);
        assert_eq!(s.valid, (3, 3));
        assert_eq!(s.padded, (8, 8));
        let m = s.validity_map();
        assert_eq!(m.iter().filter(|&&b| b).count(), 9);
        assert!(m[0] && m[2 * 8 + 2] && !m[3 * 8] && !m[2 * 8 + 3]);
    }
}
