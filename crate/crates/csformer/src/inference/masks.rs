//! Attention masks for shifted windows and padded features.
//!
//! A single keep-predicate drives both concerns: two tokens may attend iff
//! both map to valid (non-padded) source positions and both fall in the same
//! fragment of the shifted window partition. Padded query rows keep only
//! their diagonal so softmax stays defined; their outputs are discarded by
//! the validity map.

use crate::tensor::AttnMask;

/// Fragment id of a source coordinate under a window partition anchored at
/// `-shift`: rows [0, ws-shift), [ws-shift, 2ws-shift), ... get 0, 1, ...
fn fragment(coord: usize, ws: usize, shift: usize) -> usize {
    (coord + shift) / ws
}

/// Build the combined shift + padding mask for one level.
///
/// `h`, `w` are the padded dims (multiples of `ws`), `shift` the cyclic
/// shift applied before partitioning, and `validity` the row-major keep map
/// of real content (None = everything valid). Returns `None` when no mask is
/// needed (unshifted, fully valid).
pub fn build_window_mask(
    h: usize,
    w: usize,
    ws: usize,
    shift: usize,
    validity: Option<&[bool]>,
) -> Option<AttnMask> {
    assert!(h % ws == 0 && w % ws == 0, "dims must be window multiples");
    assert!(shift < ws);
    if shift == 0 && validity.is_none() {
        return None;
    }
    let valid = |y: usize, x: usize| validity.is_none_or(|v| v[y * w + x]);
    // Source coordinate of rolled position (y, x): the roll by -shift brings
    // (y + shift) mod h into row y.
    let src = |y: usize, x: usize| ((y + shift) % h, (x + shift) % w);

    let (wins_y, wins_x) = (h / ws, w / ws);
    let l = ws * ws;
    let mut keep = vec![false; wins_y * wins_x * l * l];
    for wy in 0..wins_y {
        for wx in 0..wins_x {
            let wi = wy * wins_x + wx;
            for q in 0..l {
                let (qy, qx) = src(wy * ws + q / ws, wx * ws + q % ws);
                let q_valid = valid(qy, qx);
                let qf = (fragment(qy, ws, shift), fragment(qx, ws, shift));
                for k in 0..l {
                    let (ky, kx) = src(wy * ws + k / ws, wx * ws + k % ws);
                    let ok = if q_valid {
                        valid(ky, kx)
                            && qf == (fragment(ky, ws, shift), fragment(kx, ws, shift))
                    } else {
                        q == k
                    };
                    keep[(wi * l + q) * l + k] = ok;
                }
            }
        }
    }
    Some(AttnMask::new(keep, wins_y * wins_x, l))
}

/// Pad mask for global attention over an `h x w` map (windows = 1). `None`
/// when everything is valid.
pub fn build_global_mask(h: usize, w: usize, validity: Option<&[bool]>) -> Option<AttnMask> {
    let v = validity?;
    if v.iter().all(|&b| b) {
        return None;
    }
    let l = h * w;
    let mut keep = vec![false; l * l];
    for q in 0..l {
        for k in 0..l {
            keep[q * l + k] = if v[q] { v[k] } else { q == k };
        }
    }
    Some(AttnMask::new(keep, 1, l))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Brute-force oracle: materialize the fragments of the shifted
    /// partition as explicit coordinate sets and derive pair admissibility
    /// from shared membership.
    fn oracle_keep(
        h: usize,
        w: usize,
        ws: usize,
        shift: usize,
        validity: Option<&[bool]>,
    ) -> impl Fn((usize, usize), (usize, usize)) -> bool + '_ {
        move |a: (usize, usize), b: (usize, usize)| {
            let valid = |p: (usize, usize)| validity.is_none_or(|v| v[p.0 * w + p.1]);
            if !valid(a) {
                return a == b;
            }
            // Band edges of the shifted partition along one axis.
            let bands = |ext: usize| {
                let mut edges = vec![0];
                let mut e = ws - shift;
                while e < ext {
                    edges.push(e);
                    e += ws;
                }
                edges.push(ext);
                edges
            };
            let band_of = |edges: &[usize], c: usize| {
                edges.windows(2).position(|p| p[0] <= c && c < p[1]).unwrap()
            };
            let (ye, xe) = (bands(h), bands(w));
            valid(b)
                && band_of(&ye, a.0) == band_of(&ye, b.0)
                && band_of(&xe, a.1) == band_of(&xe, b.1)
        }
    }

    fn check_against_oracle(h: usize, w: usize, ws: usize, shift: usize, validity: Option<&[bool]>) {
        let mask = build_window_mask(h, w, ws, shift, validity)
            .unwrap_or_else(|| AttnMask::all_keep((h / ws) * (w / ws), ws * ws));
        let oracle = oracle_keep(h, w, ws, shift, validity);
        let src = |y: usize, x: usize| ((y + shift) % h, (x + shift) % w);
        let wins_x = w / ws;
        for wy in 0..h / ws {
            for wx in 0..wins_x {
                let wi = wy * wins_x + wx;
                for q in 0..ws * ws {
                    let qs = src(wy * ws + q / ws, wx * ws + q % ws);
                    for k in 0..ws * ws {
                        let ks = src(wy * ws + k / ws, wx * ws + k % ws);
                        let want = if qs == ks { true } else { oracle(qs, ks) };
                        assert_eq!(
                            mask.keep(wi, q, k),
                            want,
                            "h={h} w={w} shift={shift} window ({wy},{wx}) q={qs:?} k={ks:?}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn unshifted_fully_valid_needs_no_mask() {
        assert!(build_window_mask(16, 16, 8, 0, None).is_none());
    }

    #[test]
    fn shift_mask_matches_pair_oracle() {
        check_against_oracle(16, 16, 8, 4, None);
        check_against_oracle(8, 16, 8, 4, None);
        check_against_oracle(8, 8, 8, 4, None);
    }

    #[test]
    fn one_padded_column_excludes_eight_keys_per_row() {
        // 8x8 window with the last column padded: every valid query row
        // excludes exactly the 8 positions of that column.
        let mut validity = vec![true; 64];
        for y in 0..8 {
            validity[y * 8 + 7] = false;
        }
        let mask = build_window_mask(8, 8, 8, 0, Some(&validity)).unwrap();
        for q in 0..64 {
            if validity[q] {
                let excluded = (0..64).filter(|&k| !mask.keep(0, q, k)).count();
                assert_eq!(excluded, 8);
            }
        }
    }

    #[test]
    fn combined_shift_and_pad_mask_matches_pair_enumeration() {
        // 12x12 content padded to 16x16.
        let (h, w) = (16, 16);
        let mut validity = vec![false; h * w];
        for y in 0..12 {
            for x in 0..12 {
                validity[y * w + x] = true;
            }
        }
        check_against_oracle(h, w, 8, 4, Some(&validity));
        check_against_oracle(h, w, 8, 0, Some(&validity));
    }

    #[test]
    fn fully_padded_window_keeps_its_diagonal() {
        // 4x4 content in 16x16: window (1,1) is pure padding.
        let (h, w) = (16, 16);
        let mut validity = vec![false; h * w];
        for y in 0..4 {
            for x in 0..4 {
                validity[y * w + x] = true;
            }
        }
        let mask = build_window_mask(h, w, 8, 0, Some(&validity)).unwrap();
        let wi = 3; // bottom-right window
        for q in 0..64 {
            for k in 0..64 {
                assert_eq!(mask.keep(wi, q, k), q == k);
            }
        }
    }

    #[test]
    fn global_mask_restricts_to_valid_tokens() {
        let validity = vec![true, true, false, true];
        let mask = build_global_mask(2, 2, Some(&validity)).unwrap();
        assert!(mask.keep(0, 0, 1));
        assert!(!mask.keep(0, 0, 2));
        assert!(mask.keep(0, 2, 2) && !mask.keep(0, 2, 0));
        assert!(build_global_mask(2, 2, Some(&[true; 4])).is_none());
    }
}
