//! Summaries computed from recorded traces: oscillation, closest approach, key frames.

use std::collections::VecDeque;

/// Sign flips needed inside one window to flag oscillation (strictly more than this).
pub const OSCILLATION_FLIPS: usize = 20;
pub const OSCILLATION_WINDOW: usize = 50;
/// Action components at or below this magnitude carry no sign.
pub const SIGN_DEADBAND: f64 = 1e-6;

pub const KEYFRAME_INTERVAL: u32 = 100;
pub const KEYFRAME_CAP: usize = 12;

/// Oscillation description shared with the rewriter prompt.
pub const OSCILLATION_DEFINITION: &str = "The oscillation flag is true when, for some Cartesian axis of the applied action, \
the sign changes more than 20 times within a window of 50 consecutive steps. Components with magnitude at most 1e-6 \
carry no sign and are skipped; a change is counted between consecutive signed samples that both lie in the window.";

fn sign(x: f64) -> i8 {
    if x > SIGN_DEADBAND {
        1
    } else if x < -SIGN_DEADBAND {
        -1
    } else {
        0
    }
}

/// Whether any Cartesian axis of `actions` oscillates.
///
/// A flip is a pair of consecutive signed samples `(p, t)` with opposite
/// signs. It falls in the window starting at `s` when `s <= p` and
/// `t < s + OSCILLATION_WINDOW`.
pub fn oscillation_flag(actions: &[[f64; 4]]) -> bool {
    (0..3).any(|axis| max_flips_in_window(actions.iter().map(|a| a[axis])) > OSCILLATION_FLIPS)
}

/// Largest number of sign flips of one axis inside any window.
pub fn max_flips_in_window(values: impl Iterator<Item = f64>) -> usize {
    let mut flips: Vec<(usize, usize)> = Vec::new();
    let mut last: Option<(usize, i8)> = None;
    for (t, x) in values.enumerate() {
        let s = sign(x);
        if s == 0 {
            continue;
        }
        if let Some((p, ps)) = last {
            if ps != s {
                flips.push((p, t));
            }
        }
        last = Some((t, s));
    }
    // Windows worth checking end right at a flip's later sample.
    let mut best = 0;
    let mut open: VecDeque<(usize, usize)> = VecDeque::new();
    for &(p, t) in &flips {
        open.push_back((p, t));
        let start = (t + 1).saturating_sub(OSCILLATION_WINDOW);
        while open.front().is_some_and(|&(p0, _)| p0 < start) {
            open.pop_front();
        }
        best = best.max(open.len());
    }
    best
}

/// Closest recorded distance between end effector and target, skipping steps without a target.
pub fn min_distance<'a>(pairs: impl Iterator<Item = (&'a [f64; 3], Option<&'a [f64; 3]>)>) -> Option<f64> {
    pairs
        .filter_map(|(e, o)| {
            let o = o?;
            Some(((e[0] - o[0]).powi(2) + (e[1] - o[1]).powi(2) + (e[2] - o[2]).powi(2)).sqrt())
        })
        .fold(None, |m: Option<f64>, d| Some(m.map_or(d, |m| m.min(d))))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum FrameKind {
    Interval,
    Final,
    Transition,
}

/// Steps whose frames are kept for an episode of `steps` observations.
///
/// Candidates are every phase transition, every `KEYFRAME_INTERVAL`-th step and
/// the last observation. Over the cap, interval frames go first, then the final
/// frame, then transitions; within a kind the earliest goes first.
pub fn select_keyframes(transitions: &[u32], steps: u32) -> Vec<(u32, FrameKind)> {
    if steps == 0 {
        return Vec::new();
    }
    let mut cand: Vec<(u32, FrameKind)> = Vec::new();
    let mut push = |step: u32, kind: FrameKind| {
        if let Some(c) = cand.iter_mut().find(|c| c.0 == step) {
            c.1 = c.1.max(kind);
        } else {
            cand.push((step, kind));
        }
    };
    for &t in transitions.iter().filter(|&&t| t < steps) {
        push(t, FrameKind::Transition);
    }
    for s in (0..steps).step_by(KEYFRAME_INTERVAL as usize) {
        push(s, FrameKind::Interval);
    }
    push(steps - 1, FrameKind::Final);
    while cand.len() > KEYFRAME_CAP {
        let victim = cand
            .iter()
            .enumerate()
            .min_by_key(|(_, c)| (c.1, c.0))
            .map(|(i, _)| i)
            .expect("non-empty");
        cand.remove(victim);
    }
    cand.sort_by_key(|c| c.0);
    cand
}

#[cfg(test)]
mod tests {
    use super::*;

    fn axis0(xs: &[f64]) -> Vec<[f64; 4]> {
        xs.iter().map(|&x| [x, 0.0, 0.0, 0.0]).collect()
    }

    #[test]
    fn alternating_signs_oscillate() {
        let xs: Vec<f64> = (0..30).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        assert!(oscillation_flag(&axis0(&xs)));
        assert!(!oscillation_flag(&axis0(&xs[..21])));
        assert!(oscillation_flag(&axis0(&xs[..22])));
    }

    #[test]
    fn zeros_are_skipped() {
        let xs: Vec<f64> = (0..60).map(|i| if i % 2 == 1 { 0.0 } else if i % 4 == 0 { 1.0 } else { -1.0 }).collect();
        // Signed samples two steps apart, 30 samples in 59 steps: 24 flips fit a window.
        assert_eq!(max_flips_in_window(xs.iter().copied()), 24);
        assert!(!oscillation_flag(&axis0(&[0.0; 100])));
    }

    #[test]
    fn gripper_axis_is_ignored() {
        let acts: Vec<[f64; 4]> = (0..60).map(|i| [0.5, 0.0, 0.0, if i % 2 == 0 { 1.0 } else { -1.0 }]).collect();
        assert!(!oscillation_flag(&acts));
    }

    #[test]
    fn closest_approach() {
        let e = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]];
        let o = [[3.0, 4.0, 0.0], [1.0, 0.0, 2.0]];
        let d = min_distance(e.iter().zip([Some(&o[0]), Some(&o[1])]));
        assert_eq!(d, Some(2.0));
        assert_eq!(min_distance(e.iter().zip([None, None])), None);
    }

    #[test]
    fn interval_only_episode() {
        let f: Vec<u32> = select_keyframes(&[], 500).into_iter().map(|f| f.0).collect();
        assert_eq!(f, vec![0, 100, 200, 300, 400, 499]);
    }

    #[test]
    fn transitions_and_intervals() {
        let f = select_keyframes(&[10, 20, 150, 230], 300);
        let steps: Vec<u32> = f.iter().map(|f| f.0).collect();
        assert_eq!(steps, vec![0, 10, 20, 100, 150, 200, 230, 299]);
        assert_eq!(f.iter().filter(|f| f.1 == FrameKind::Transition).count(), 4);
    }

    #[test]
    fn cap_drops_earliest_intervals() {
        let f = select_keyframes(&[50, 150, 250, 350, 450, 550], 700);
        // 6 transitions, 7 intervals, 1 final: two earliest intervals go.
        let steps: Vec<u32> = f.iter().map(|f| f.0).collect();
        assert_eq!(steps, vec![50, 150, 200, 250, 300, 350, 400, 450, 500, 550, 600, 699]);
    }

    #[test]
    fn cap_keeps_only_transitions() {
        let t: Vec<u32> = (1..=15).map(|i| i * 7).collect();
        let f = select_keyframes(&t, 120);
        assert_eq!(f.len(), KEYFRAME_CAP);
        assert!(f.iter().all(|f| f.1 == FrameKind::Transition));
        assert_eq!(f[0].0, 28);
    }
}
