//! Attention mask strategies: the two self-attention kinds, the four
//! bidirectional-cross-attention kinds, the task-to-mask routing table, the
//! stochastic token masking used in training, and a reachability verifier
//! used by the leakage tests.

use rand::Rng;

use crate::error::{CoreError, CoreResult};
use crate::scalar::Scalar;
use crate::task::TaskId;

/// Self-attention mask strategy of one decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SaMaskKind {
    /// Each token attends the leftward context and itself.
    Causal,
    /// All tokens attend each other.
    NonCausal,
    /// The owning decoder is disabled for this task.
    Disabled,
}

impl SaMaskKind {
    pub fn name(self) -> &'static str {
        match self {
            SaMaskKind::Causal => "causal",
            SaMaskKind::NonCausal => "non-causal",
            SaMaskKind::Disabled => "none",
        }
    }
}

/// Bidirectional-cross-attention mask strategy between the two decoders.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BcaMaskKind {
    /// Both directions, bounded at time step <= t.
    Br,
    /// Vocals attend the full accompaniment context; accompaniment is cut off.
    A2v,
    /// Mirror of A2V.
    V2a,
    /// Neither sequence attends the other.
    None,
}

impl BcaMaskKind {
    pub fn name(self) -> &'static str {
        match self {
            BcaMaskKind::Br => "br",
            BcaMaskKind::A2v => "a2v",
            BcaMaskKind::V2a => "v2a",
            BcaMaskKind::None => "none",
        }
    }
}

/// T_query x T_key grid over {attend, blocked}.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskMatrix {
    t_query: usize,
    t_key: usize,
    /// true = may attend (additive 0), false = blocked (additive -inf).
    allow: Vec<bool>,
}

impl MaskMatrix {
    pub fn new(t_query: usize, t_key: usize, allow: Vec<bool>) -> Self {
        assert_eq!(allow.len(), t_query * t_key);
        MaskMatrix {
            t_query,
            t_key,
            allow,
        }
    }

    pub fn query_len(&self) -> usize {
        self.t_query
    }

    pub fn key_len(&self) -> usize {
        self.t_key
    }

    pub fn allowed(&self, i: usize, j: usize) -> bool {
        self.allow[i * self.t_key + j]
    }

    /// Additive form: 0 where attending is allowed, -inf where blocked.
    pub fn to_additive<S: Scalar>(&self) -> Vec<S> {
        self.allow
            .iter()
            .map(|&a| if a { S::zero() } else { S::neg_infinity() })
            .collect()
    }

    /// Golden-file rendering: one row per line, '0' = attend, '-' = blocked.
    pub fn render_golden(&self) -> String {
        self.render_with('0', '-')
    }

    /// Screen rendering used by the mask inspector.
    pub fn render_pretty(&self) -> String {
        self.render_with('0', '·')
    }

    fn render_with(&self, yes: char, no: char) -> String {
        let mut out = String::with_capacity((self.t_key + 1) * self.t_query);
        for i in 0..self.t_query {
            for j in 0..self.t_key {
                out.push(if self.allowed(i, j) { yes } else { no });
            }
            out.push('\n');
        }
        out
    }
}

/// The per-task mask bundle: one row of the task routing table.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MaskConfig {
    pub vocal_sa: SaMaskKind,
    pub accomp_sa: SaMaskKind,
    pub bca: BcaMaskKind,
    pub vocal_enabled: bool,
    pub accomp_enabled: bool,
    pub song_head_enabled: bool,
}

impl MaskConfig {
    /// One-line rendering used by the golden routing table and the inspector.
    pub fn render(&self) -> String {
        fn onoff(b: bool) -> &'static str {
            if b {
                "on"
            } else {
                "off"
            }
        }
        format!(
            "sa={},{} bca={} vocal={} accomp={} song={}",
            self.vocal_sa.name(),
            self.accomp_sa.name(),
            self.bca.name(),
            onoff(self.vocal_enabled),
            onoff(self.accomp_enabled),
            onoff(self.song_head_enabled),
        )
    }
}

/// Build a self-attention mask. `Disabled` is rejected: callers must skip
/// the decoder instead of feeding a fully masked softmax.
pub fn build_sa_mask(kind: SaMaskKind, t: usize) -> CoreResult<MaskMatrix> {
    assert!(t >= 1, "mask length must be at least 1");
    match kind {
        SaMaskKind::Disabled => Err(CoreError::DisabledMask),
        SaMaskKind::Causal => {
            let mut allow = vec![false; t * t];
            for i in 0..t {
                for j in 0..=i {
                    allow[i * t + j] = true;
                }
            }
            Ok(MaskMatrix::new(t, t, allow))
        }
        SaMaskKind::NonCausal => Ok(MaskMatrix::new(t, t, vec![true; t * t])),
    }
}

/// The two directional cross-attention masks for one BCA strategy. A
/// direction whose matrix would be fully blocked is returned with
/// `bypass = true`: the model must leave that sublayer's residual stream
/// unchanged rather than evaluate an empty-support softmax.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BcaMasks {
    /// Vocal queries attending accompaniment keys.
    pub vocal_from_accomp: MaskMatrix,
    pub vocal_bypass: bool,
    /// Accompaniment queries attending vocal keys.
    pub accomp_from_vocal: MaskMatrix,
    pub accomp_bypass: bool,
}

/// Build both directions of the bidirectional cross-attention mask. The two
/// streams share length `t`.
pub fn build_bca_masks(kind: BcaMaskKind, t: usize) -> BcaMasks {
    assert!(t >= 1, "mask length must be at least 1");
    let step_bounded = || {
        let mut allow = vec![false; t * t];
        for i in 0..t {
            for j in 0..=i {
                allow[i * t + j] = true;
            }
        }
        MaskMatrix::new(t, t, allow)
    };
    let full = || MaskMatrix::new(t, t, vec![true; t * t]);
    let blocked = || MaskMatrix::new(t, t, vec![false; t * t]);
    match kind {
        BcaMaskKind::Br => BcaMasks {
            vocal_from_accomp: step_bounded(),
            vocal_bypass: false,
            accomp_from_vocal: step_bounded(),
            accomp_bypass: false,
        },
        BcaMaskKind::A2v => BcaMasks {
            vocal_from_accomp: full(),
            vocal_bypass: false,
            accomp_from_vocal: blocked(),
            accomp_bypass: true,
        },
        BcaMaskKind::V2a => BcaMasks {
            vocal_from_accomp: blocked(),
            vocal_bypass: true,
            accomp_from_vocal: full(),
            accomp_bypass: false,
        },
        BcaMaskKind::None => BcaMasks {
            vocal_from_accomp: blocked(),
            vocal_bypass: true,
            accomp_from_vocal: blocked(),
            accomp_bypass: true,
        },
    }
}

/// The task routing table. Each arm is one row of the supported-task table:
/// (vocal SA, accomp SA, BCA, which decoders run, whether the song head runs).
pub fn route_task(task: TaskId) -> MaskConfig {
    use BcaMaskKind as B;
    use SaMaskKind as S;
    let (vocal_sa, accomp_sa, bca, vocal, accomp, song) = match task {
        TaskId::LyricsToSong => (S::Causal, S::Causal, B::Br, true, true, true),
        TaskId::LyricsToVocals => (S::Causal, S::Causal, B::Br, true, true, false),
        TaskId::AccompanimentToSong => (S::Causal, S::NonCausal, B::A2v, true, true, true),
        TaskId::VocalsToSong => (S::NonCausal, S::Causal, B::V2a, true, true, true),
        TaskId::MusicContinuation => (S::Disabled, S::Causal, B::None, false, true, false),
        TaskId::SongEditing => (S::Causal, S::Causal, B::Br, true, true, true),
        TaskId::VocalsEditing => (S::Causal, S::Disabled, B::None, true, false, false),
        TaskId::VocalsEditingInSong => (S::Causal, S::NonCausal, B::A2v, true, true, true),
    };
    MaskConfig {
        vocal_sa,
        accomp_sa,
        bca,
        vocal_enabled: vocal,
        accomp_enabled: accomp,
        song_head_enabled: song,
    }
}

/// Independent Bernoulli(rate) per position; `true` marks a masked position
/// whose input token is replaced by MASK before embedding.
pub fn sample_token_mask<R: Rng>(t: usize, rate: f64, rng: &mut R) -> Vec<bool> {
    assert!((0.0..=1.0).contains(&rate), "rate must be within [0, 1]");
    (0..t).map(|_| rng.gen_bool(rate)).collect()
}

/// Which (stream, position) pairs can influence which others after `layers`
/// DSLM blocks under a given mask config. Stream 0 is vocal, stream 1 is
/// accompaniment. Built by composing the per-layer mask relations; used by
/// the leakage tests.
#[derive(Debug, Clone)]
pub struct Reachability {
    t: usize,
    /// reach[to][from], nodes indexed stream * t + pos.
    reach: Vec<Vec<bool>>,
}

impl Reachability {
    /// True if information at (from_stream, from_pos) can influence the
    /// hidden state at (to_stream, to_pos).
    pub fn reachable(
        &self,
        from_stream: usize,
        from_pos: usize,
        to_stream: usize,
        to_pos: usize,
    ) -> bool {
        self.reach[to_stream * self.t + to_pos][from_stream * self.t + from_pos]
    }
}

pub fn flow_reachability(config: &MaskConfig, t: usize, layers: usize) -> Reachability {
    let n = 2 * t;
    let enabled = [config.vocal_enabled, config.accomp_enabled];
    let sa = [config.vocal_sa, config.accomp_sa];
    let bca = build_bca_masks(config.bca, t);

    // One-block relation: step[to][from].
    let mut step = vec![vec![false; n]; n];
    for (s, &on) in enabled.iter().enumerate() {
        if !on {
            continue;
        }
        for i in 0..t {
            let to = s * t + i;
            step[to][to] = true; // residual path
            if let Ok(m) = build_sa_mask(sa[s], t) {
                for j in 0..t {
                    if m.allowed(i, j) {
                        step[to][s * t + j] = true;
                    }
                }
            }
            let (cross, bypass) = if s == 0 {
                (&bca.vocal_from_accomp, bca.vocal_bypass)
            } else {
                (&bca.accomp_from_vocal, bca.accomp_bypass)
            };
            if !bypass {
                for j in 0..t {
                    if cross.allowed(i, j) {
                        step[to][(1 - s) * t + j] = true;
                    }
                }
            }
        }
    }

    // reach = step^layers (boolean composition), starting from identity.
    let mut reach = vec![vec![false; n]; n];
    for (i, row) in reach.iter_mut().enumerate() {
        row[i] = true;
    }
    for _ in 0..layers {
        let mut next = vec![vec![false; n]; n];
        for (to, nrow) in next.iter_mut().enumerate() {
            for (mid, reach_row) in reach.iter().enumerate() {
                if step[to][mid] {
                    for (v, &r) in nrow.iter_mut().zip(reach_row) {
                        *v = *v || r;
                    }
                }
            }
        }
        reach = next;
    }
    Reachability { t, reach }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn causal_mask_examples() {
        let m = build_sa_mask(SaMaskKind::Causal, 1).unwrap();
        assert_eq!(m.render_golden(), "0\n");
        let m = build_sa_mask(SaMaskKind::Causal, 3).unwrap();
        assert_eq!(m.render_golden(), "0--\n00-\n000\n");
        let m = build_sa_mask(SaMaskKind::NonCausal, 3).unwrap();
        assert_eq!(m.render_golden(), "000\n000\n000\n");
        assert_eq!(
            build_sa_mask(SaMaskKind::Disabled, 3).unwrap_err(),
            CoreError::DisabledMask
        );
    }

    #[test]
    fn bca_mask_examples() {
        let m = build_bca_masks(BcaMaskKind::Br, 2);
        assert_eq!(m.vocal_from_accomp.render_golden(), "0-\n00\n");
        assert_eq!(m.accomp_from_vocal.render_golden(), "0-\n00\n");
        assert!(!m.vocal_bypass && !m.accomp_bypass);

        let m = build_bca_masks(BcaMaskKind::A2v, 2);
        assert_eq!(m.vocal_from_accomp.render_golden(), "00\n00\n");
        assert!(!m.vocal_bypass);
        assert!(m.accomp_bypass);

        for t in [1, 3, 8] {
            let m = build_bca_masks(BcaMaskKind::None, t);
            assert!(m.vocal_bypass && m.accomp_bypass);
        }
    }

    /// Brute-force enumerations written directly from the prose definitions:
    /// causal = "leftward context tokens and itself", non-causal = "all",
    /// BR = "time step less than or equal to t", A2V/V2A = one side full,
    /// other side blocked, None = both blocked.
    #[test]
    fn masks_match_prose_enumeration_up_to_t8() {
        for t in 1..=8usize {
            let causal = build_sa_mask(SaMaskKind::Causal, t).unwrap();
            let noncausal = build_sa_mask(SaMaskKind::NonCausal, t).unwrap();
            for i in 0..t {
                for j in 0..t {
                    assert_eq!(causal.allowed(i, j), j <= i);
                    assert!(noncausal.allowed(i, j));
                }
            }
            for kind in [
                BcaMaskKind::Br,
                BcaMaskKind::A2v,
                BcaMaskKind::V2a,
                BcaMaskKind::None,
            ] {
                let m = build_bca_masks(kind, t);
                for i in 0..t {
                    for j in 0..t {
                        let (v_expect, a_expect) = match kind {
                            BcaMaskKind::Br => (j <= i, j <= i),
                            BcaMaskKind::A2v => (true, false),
                            BcaMaskKind::V2a => (false, true),
                            BcaMaskKind::None => (false, false),
                        };
                        assert_eq!(m.vocal_from_accomp.allowed(i, j), v_expect);
                        assert_eq!(m.accomp_from_vocal.allowed(i, j), a_expect);
                    }
                }
            }
        }
    }

    #[test]
    fn route_task_rows() {
        let c = route_task(TaskId::LyricsToSong);
        assert_eq!(
            (c.vocal_sa, c.accomp_sa, c.bca),
            (SaMaskKind::Causal, SaMaskKind::Causal, BcaMaskKind::Br)
        );
        assert!(c.vocal_enabled && c.accomp_enabled && c.song_head_enabled);

        let c = route_task(TaskId::MusicContinuation);
        assert_eq!(
            (c.vocal_sa, c.accomp_sa, c.bca),
            (SaMaskKind::Disabled, SaMaskKind::Causal, BcaMaskKind::None)
        );
        assert!(!c.vocal_enabled && c.accomp_enabled && !c.song_head_enabled);

        let c = route_task(TaskId::VocalsEditingInSong);
        assert_eq!(
            (c.vocal_sa, c.accomp_sa, c.bca),
            (SaMaskKind::Causal, SaMaskKind::NonCausal, BcaMaskKind::A2v)
        );

        let c = route_task(TaskId::AccompanimentToSong);
        assert_eq!(
            (c.vocal_sa, c.accomp_sa, c.bca),
            (SaMaskKind::Causal, SaMaskKind::NonCausal, BcaMaskKind::A2v)
        );
        let c = route_task(TaskId::VocalsToSong);
        assert_eq!(
            (c.vocal_sa, c.accomp_sa, c.bca),
            (SaMaskKind::NonCausal, SaMaskKind::Causal, BcaMaskKind::V2a)
        );
        let c = route_task(TaskId::VocalsEditing);
        assert_eq!(
            (c.vocal_sa, c.accomp_sa, c.bca),
            (SaMaskKind::Causal, SaMaskKind::Disabled, BcaMaskKind::None)
        );
        assert!(c.vocal_enabled && !c.accomp_enabled && !c.song_head_enabled);
    }

    #[test]
    fn disabled_sa_only_on_disabled_decoders() {
        for task in crate::task::ALL_TASKS {
            let c = route_task(task);
            assert_eq!(c.vocal_sa == SaMaskKind::Disabled, !c.vocal_enabled);
            assert_eq!(c.accomp_sa == SaMaskKind::Disabled, !c.accomp_enabled);
        }
    }

    #[test]
    fn token_mask_degenerate_rates() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_token_mask(32, 0.0, &mut rng).iter().all(|&b| !b));
        assert!(sample_token_mask(32, 1.0, &mut rng).iter().all(|&b| b));
    }

    #[test]
    fn token_mask_concentrates_at_rate() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mask = sample_token_mask(10_000, 0.2, &mut rng);
        let frac = mask.iter().filter(|&&b| b).count() as f64 / 10_000.0;
        assert!((frac - 0.2).abs() <= 0.02, "masked fraction {frac}");
    }

    #[test]
    fn reachability_respects_masks() {
        // Causal + BR: vocal position 2 is unreachable from accomp position 5
        // for any number of layers.
        let c = route_task(TaskId::LyricsToSong);
        for layers in 1..=4 {
            let r = flow_reachability(&c, 8, layers);
            assert!(!r.reachable(1, 5, 0, 2));
            assert!(r.reachable(1, 2, 0, 2));
            assert!(!r.reachable(0, 3, 0, 2));
        }

        // A2V: accomp positions unreachable from any vocal position.
        let c = route_task(TaskId::AccompanimentToSong);
        let r = flow_reachability(&c, 8, 4);
        for vp in 0..8 {
            for ap in 0..8 {
                assert!(!r.reachable(0, vp, 1, ap));
                assert!(r.reachable(1, vp, 0, ap)); // full-context other way
            }
        }

        // Non-causal SA reaches backward within its own stream.
        let r = flow_reachability(&route_task(TaskId::VocalsToSong), 8, 2);
        assert!(r.reachable(0, 7, 0, 0));

        // None: no cross-stream path at all.
        let c = route_task(TaskId::MusicContinuation);
        let r = flow_reachability(&c, 8, 4);
        for a in 0..8 {
            for b in 0..8 {
                assert!(!r.reachable(0, a, 1, b));
                assert!(!r.reachable(1, a, 0, b));
            }
        }
    }
}
