//! Teacher-forcing example assembly: prompt carving, the editing layout with
//! its <EDIT> separator, stochastic input masking for the non-causal stream,
//! BR/None mixing and lyric dropout.
//!
//! Column layouts (one stream):
//!   plain:        [BOS, x_0 .. x_{n-1}]              targets x_0 .. x_{n-1}, EOS
//!   prompt m>=1:  [x_0 .. x_{m-1}, SEP, BOS, x_m ..] targets x_m .., EOS after BOS
//!   edit span s:  [x_{n-s} .. x_{n-1}, EDIT, BOS, x_0 .. x_{n-1}]
//!                 targets the full track, loss only on the target region
//! Loss masks are 0 on prompt/SEP/EDIT/PAD columns; a non-causal stream's
//! loss covers every non-pad target position.

use rand::Rng;

use crate::config::TrainConfig;
use crate::corpus::Clip;
use crate::error::{CoreError, CoreResult};
use crate::mask::{route_task, BcaMaskKind, MaskConfig};
use crate::task::{TaskId, TrainTask};
use crate::vocab::{BOS, EDIT, EOS, MASK, PAD, SEP};

/// One stream of a teacher-forcing example.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StreamExample {
    pub input: Vec<u32>,
    pub target: Vec<u32>,
    /// 1 where the position contributes to the loss.
    pub loss_mask: Vec<u8>,
    /// Clip position predicted at each column; the value n marks the EOS
    /// slot and -1 marks prompt/pad columns. Used for song-stream alignment.
    pub clip_pos: Vec<i32>,
    /// Columns before padding (valid attention keys).
    pub real_len: usize,
    pub prompt_len: usize,
    /// Length in tokens of the editing suffix span, if this stream uses the
    /// editing layout.
    pub edit_span: Option<usize>,
}

impl StreamExample {
    fn disabled(t: usize) -> Self {
        StreamExample {
            input: vec![PAD; t],
            target: vec![PAD; t],
            loss_mask: vec![0; t],
            clip_pos: vec![-1; t],
            real_len: 0,
            prompt_len: 0,
            edit_span: None,
        }
    }

    fn pad_to(&mut self, t: usize) {
        while self.input.len() < t {
            self.input.push(PAD);
            self.target.push(PAD);
            self.loss_mask.push(0);
            self.clip_pos.push(-1);
        }
    }

    fn len(&self) -> usize {
        self.input.len()
    }
}

/// A fully assembled teacher-forcing instance.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    pub task: TrainTask,
    /// The inference-task row this example's masks were routed from.
    pub routed_task: TaskId,
    pub mask_config: MaskConfig,
    pub lyric_ids: Vec<u32>,
    pub lyrics_dropped: bool,
    pub vocal: StreamExample,
    pub accomp: StreamExample,
    pub song_target: Vec<u32>,
    pub song_loss_mask: Vec<u8>,
    /// Common column count of both streams.
    pub t: usize,
    /// Whether the song-from-lyrics draw picked BR (audited at 80%).
    pub br_drawn: bool,
    /// Input-masking audit counters for the non-causal stream.
    pub masked_positions: usize,
    pub maskable_positions: usize,
}

/// Causal-stream layout: optional prompt prefix of the clip's own first
/// `prompt` tokens, then the continuation as the target region.
fn causal_stream(track: &[u32], prompt: usize) -> StreamExample {
    let n = track.len();
    debug_assert!(prompt < n);
    let mut input = Vec::new();
    let mut target = Vec::new();
    let mut loss_mask = Vec::new();
    let mut clip_pos = Vec::new();
    if prompt > 0 {
        for &tok in &track[..prompt] {
            input.push(tok);
            target.push(PAD);
            loss_mask.push(0);
            clip_pos.push(-1);
        }
        input.push(SEP);
        target.push(PAD);
        loss_mask.push(0);
        clip_pos.push(-1);
    }
    // target region: input [BOS, x_prompt .. x_{n-1}], targets shifted by one
    // so the last column predicts EOS
    input.push(BOS);
    input.extend_from_slice(&track[prompt..]);
    for j in prompt..n {
        target.push(track[j]);
        loss_mask.push(1);
        clip_pos.push(j as i32);
    }
    target.push(EOS);
    loss_mask.push(1);
    clip_pos.push(n as i32);
    let real_len = input.len();
    debug_assert_eq!(real_len, target.len());
    StreamExample {
        input,
        target,
        loss_mask,
        clip_pos,
        real_len,
        prompt_len: prompt,
        edit_span: None,
    }
}

/// Editing layout: a suffix span of the track sits in the prompt position,
/// then EDIT, then the full track as the target region.
fn edit_stream(track: &[u32], span: usize) -> StreamExample {
    let n = track.len();
    debug_assert!(span >= 1 && span < n);
    let mut input = Vec::new();
    let mut target = Vec::new();
    let mut loss_mask = Vec::new();
    let mut clip_pos = Vec::new();
    for &tok in &track[n - span..] {
        input.push(tok);
        target.push(PAD);
        loss_mask.push(0);
        clip_pos.push(-1);
    }
    input.push(EDIT);
    target.push(PAD);
    loss_mask.push(0);
    clip_pos.push(-1);
    input.push(BOS);
    input.extend_from_slice(track);
    for (j, &tok) in track.iter().enumerate() {
        target.push(tok);
        loss_mask.push(1);
        clip_pos.push(j as i32);
    }
    target.push(EOS);
    loss_mask.push(1);
    clip_pos.push(n as i32);
    let real_len = input.len();
    StreamExample {
        input,
        target,
        loss_mask,
        clip_pos,
        real_len,
        prompt_len: 0,
        edit_span: Some(span),
    }
}

/// Pre-determined stream layout: the full track is given, the self-attention
/// is non-causal, a fraction of the input tokens is replaced by MASK, and the
/// loss covers all tokens, not just the masked ones.
fn predetermined_stream<R: Rng>(
    track: &[u32],
    mask_rate: f64,
    rng: &mut R,
) -> (StreamExample, usize, usize) {
    let n = track.len();
    let mut input = Vec::with_capacity(n + 1);
    input.push(BOS);
    let flags = crate::mask::sample_token_mask(n, mask_rate, rng);
    let mut masked = 0;
    for (j, &tok) in track.iter().enumerate() {
        if flags[j] {
            masked += 1;
            input.push(MASK);
        } else {
            input.push(tok);
        }
    }
    let mut target: Vec<u32> = track.to_vec();
    target.push(EOS);
    let loss_mask = vec![1; n + 1];
    let clip_pos: Vec<i32> = (0..=n as i32).collect();
    (
        StreamExample {
            input,
            target,
            loss_mask,
            clip_pos,
            real_len: n + 1,
            prompt_len: 0,
            edit_span: None,
        },
        masked,
        n,
    )
}

fn draw_prompt_len<R: Rng>(n: usize, max_frac: f64, rng: &mut R) -> usize {
    let max = ((n as f64) * max_frac).floor() as usize;
    let max = max.min(n.saturating_sub(1));
    if max == 0 {
        0
    } else {
        rng.gen_range(0..=max)
    }
}

fn draw_edit_span<R: Rng>(n: usize, min_frac: f64, max_frac: f64, rng: &mut R) -> usize {
    let lo = ((n as f64) * min_frac).ceil() as usize;
    let hi = ((n as f64) * max_frac).floor() as usize;
    let lo = lo.clamp(1, n - 1);
    let hi = hi.clamp(lo, n - 1);
    rng.gen_range(lo..=hi)
}

/// Build the song-decoder targets: positions where both streams' columns
/// predict the same clip position (the EOS slot included).
fn song_targets(
    clip: &Clip,
    vocal: &StreamExample,
    accomp: &StreamExample,
    enabled: bool,
    t: usize,
) -> (Vec<u32>, Vec<u8>) {
    let n = clip.len() as i32;
    let mut target = vec![PAD; t];
    let mut mask = vec![0u8; t];
    if !enabled {
        return (target, mask);
    }
    for c in 0..t {
        let pv = vocal.clip_pos.get(c).copied().unwrap_or(-1);
        let pa = accomp.clip_pos.get(c).copied().unwrap_or(-1);
        if pv >= 0 && pv == pa {
            if pv < n {
                target[c] = clip.song[pv as usize];
            } else {
                target[c] = EOS;
            }
            mask[c] = 1;
        }
    }
    (target, mask)
}

/// Assemble one training example for a clip under the drawn task.
pub fn assemble_training_example<R: Rng>(
    clip: &Clip,
    task: TrainTask,
    cfg: &TrainConfig,
    rng: &mut R,
) -> CoreResult<TrainingExample> {
    let n = clip.len();
    if n < 2 {
        return Err(CoreError::BadCondition {
            task: "assemble",
            detail: format!("clip {} too short ({n} tokens)", clip.id),
        });
    }
    // independent draws, fixed order for reproducibility
    let lyrics_dropped = rng.gen_bool(cfg.lyric_dropout);
    let lyric_ids = clip.lyric_token_ids(lyrics_dropped);

    let mut br_drawn = false;
    let mut masked_positions = 0;
    let mut maskable_positions = 0;

    let (routed_task, mut mask_config, vocal, accomp) = match task {
        TrainTask::SongFromLyrics => {
            br_drawn = rng.gen_bool(cfg.br_prob);
            let m = draw_prompt_len(n, cfg.prompt_max_frac, rng);
            let cfg_masks = {
                let mut c = route_task(TaskId::LyricsToSong);
                if !br_drawn {
                    c.bca = BcaMaskKind::None;
                }
                c
            };
            (
                TaskId::LyricsToSong,
                cfg_masks,
                causal_stream(&clip.vocal, m),
                causal_stream(&clip.accomp, m),
            )
        }
        TrainTask::PredeterminedAccomp => {
            let m = draw_prompt_len(n, cfg.prompt_max_frac, rng);
            let (acc, masked, maskable) = predetermined_stream(&clip.accomp, cfg.mask_rate, rng);
            masked_positions = masked;
            maskable_positions = maskable;
            (
                TaskId::AccompanimentToSong,
                route_task(TaskId::AccompanimentToSong),
                causal_stream(&clip.vocal, m),
                acc,
            )
        }
        TrainTask::PredeterminedVocal => {
            let m = draw_prompt_len(n, cfg.prompt_max_frac, rng);
            let (voc, masked, maskable) = predetermined_stream(&clip.vocal, cfg.mask_rate, rng);
            masked_positions = masked;
            maskable_positions = maskable;
            (
                TaskId::VocalsToSong,
                route_task(TaskId::VocalsToSong),
                voc,
                causal_stream(&clip.accomp, m),
            )
        }
        TrainTask::Editing => {
            let span = draw_edit_span(n, cfg.edit_min_frac, cfg.edit_max_frac, rng);
            let subtype = match rng.gen_range(0..3) {
                0 => TaskId::SongEditing,
                1 => TaskId::VocalsEditing,
                _ => TaskId::VocalsEditingInSong,
            };
            match subtype {
                TaskId::SongEditing => (
                    subtype,
                    route_task(subtype),
                    edit_stream(&clip.vocal, span),
                    edit_stream(&clip.accomp, span),
                ),
                TaskId::VocalsEditing => (
                    subtype,
                    route_task(subtype),
                    edit_stream(&clip.vocal, span),
                    StreamExample::disabled(0),
                ),
                TaskId::VocalsEditingInSong => {
                    let (acc, masked, maskable) =
                        predetermined_stream(&clip.accomp, cfg.mask_rate, rng);
                    masked_positions = masked;
                    maskable_positions = maskable;
                    (subtype, route_task(subtype), edit_stream(&clip.vocal, span), acc)
                }
                _ => unreachable!(),
            }
        }
    };

    let mut vocal = vocal;
    let mut accomp = accomp;
    let t = vocal.len().max(accomp.len());
    if t > cfg.model.ctx_dec {
        return Err(CoreError::Overlength {
            len: t,
            max: cfg.model.ctx_dec,
        });
    }
    if !mask_config.accomp_enabled {
        accomp = StreamExample::disabled(t);
    }
    if !mask_config.vocal_enabled {
        vocal = StreamExample::disabled(t);
    }
    vocal.pad_to(t);
    accomp.pad_to(t);

    // A BR draw of None keeps the routed config otherwise intact.
    if lyric_ids.len() > cfg.model.ctx_lyrics {
        return Err(CoreError::Overlength {
            len: lyric_ids.len(),
            max: cfg.model.ctx_lyrics,
        });
    }
    let (song_target, song_loss_mask) =
        song_targets(clip, &vocal, &accomp, mask_config.song_head_enabled, t);
    // A misaligned layout leaves no song columns; drop the head for the
    // example so the forward pass can skip it.
    if mask_config.song_head_enabled && song_loss_mask.iter().all(|&m| m == 0) {
        mask_config.song_head_enabled = false;
    }

    Ok(TrainingExample {
        task,
        routed_task,
        mask_config,
        lyric_ids,
        lyrics_dropped,
        vocal,
        accomp,
        song_target,
        song_loss_mask,
        t,
        br_drawn,
        masked_positions,
        maskable_positions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{gen_corpus, CorpusMode};
    use crate::mask::SaMaskKind;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (Vec<Clip>, TrainConfig, ChaCha8Rng) {
        (
            gen_corpus(71, 32, 48, CorpusMode::Default),
            TrainConfig::default(),
            ChaCha8Rng::seed_from_u64(99),
        )
    }

    #[test]
    fn plain_causal_layout_shapes() {
        let track = [10, 11, 12, 13];
        let s = causal_stream(&track, 0);
        assert_eq!(s.input, vec![BOS, 10, 11, 12, 13]);
        assert_eq!(s.target, vec![10, 11, 12, 13, EOS]);
        assert_eq!(s.loss_mask, vec![1; 5]);
        assert_eq!(s.clip_pos, vec![0, 1, 2, 3, 4]);
        assert_eq!(s.real_len, 5);
    }

    #[test]
    fn prompt_layout_masks_prompt_and_sep() {
        let track = [10, 11, 12, 13, 14, 15];
        let s = causal_stream(&track, 2);
        assert_eq!(s.input, vec![10, 11, SEP, BOS, 12, 13, 14, 15]);
        assert_eq!(s.target, vec![PAD, PAD, PAD, 12, 13, 14, 15, EOS]);
        assert_eq!(s.loss_mask, vec![0, 0, 0, 1, 1, 1, 1, 1]);
        assert_eq!(s.clip_pos, vec![-1, -1, -1, 2, 3, 4, 5, 6]);
    }

    #[test]
    fn edit_layout_has_exactly_one_edit_token_between_span_and_target() {
        let track = [20, 21, 22, 23, 24];
        let s = edit_stream(&track, 2);
        assert_eq!(s.input, vec![23, 24, EDIT, BOS, 20, 21, 22, 23, 24]);
        assert_eq!(s.target, vec![PAD, PAD, PAD, 20, 21, 22, 23, 24, EOS]);
        assert_eq!(s.loss_mask, vec![0, 0, 0, 1, 1, 1, 1, 1, 1]);
        assert_eq!(s.edit_span, Some(2));
    }

    #[test]
    fn song_from_lyrics_masks_match_routed_row_modulo_bca_draw() {
        let (clips, cfg, mut rng) = setup();
        for clip in &clips {
            let ex =
                assemble_training_example(clip, TrainTask::SongFromLyrics, &cfg, &mut rng).unwrap();
            let routed = route_task(TaskId::LyricsToSong);
            assert_eq!(ex.mask_config.vocal_sa, routed.vocal_sa);
            assert_eq!(ex.mask_config.accomp_sa, routed.accomp_sa);
            assert!(matches!(
                ex.mask_config.bca,
                BcaMaskKind::Br | BcaMaskKind::None
            ));
            assert_eq!(ex.mask_config.bca == BcaMaskKind::Br, ex.br_drawn);
        }
    }

    #[test]
    fn predetermined_accomp_loss_covers_all_non_pad_positions() {
        let (clips, cfg, mut rng) = setup();
        let ex = assemble_training_example(&clips[0], TrainTask::PredeterminedAccomp, &cfg, &mut rng)
            .unwrap();
        assert_eq!(ex.mask_config.accomp_sa, SaMaskKind::NonCausal);
        for c in 0..ex.accomp.real_len {
            assert_eq!(ex.accomp.loss_mask[c], 1);
        }
        for c in ex.accomp.real_len..ex.t {
            assert_eq!(ex.accomp.loss_mask[c], 0);
            assert_eq!(ex.accomp.input[c], PAD);
        }
    }

    #[test]
    fn loss_masks_disjoint_from_structural_positions() {
        let (clips, cfg, mut rng) = setup();
        for task in [
            TrainTask::SongFromLyrics,
            TrainTask::PredeterminedAccomp,
            TrainTask::PredeterminedVocal,
            TrainTask::Editing,
        ] {
            for clip in clips.iter().take(8) {
                let ex = assemble_training_example(clip, task, &cfg, &mut rng).unwrap();
                for s in [&ex.vocal, &ex.accomp] {
                    for c in 0..ex.t {
                        if s.loss_mask[c] == 1 {
                            assert_ne!(s.target[c], PAD);
                        }
                        // prompt region, SEP and EDIT columns never carry loss
                        if s.input[c] == SEP || s.input[c] == EDIT {
                            assert_eq!(s.loss_mask[c], 0);
                        }
                    }
                    if let Some(span) = s.edit_span {
                        let edits: usize =
                            s.input.iter().filter(|&&x| x == EDIT).count();
                        assert_eq!(edits, 1);
                        assert_eq!(s.input[span], EDIT);
                        for c in 0..span {
                            assert_eq!(s.loss_mask[c], 0);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn editing_subtypes_route_to_their_rows() {
        let (clips, cfg, mut rng) = setup();
        let mut saw = std::collections::HashSet::new();
        for i in 0..200 {
            let ex = assemble_training_example(
                &clips[i % clips.len()],
                TrainTask::Editing,
                &cfg,
                &mut rng,
            )
            .unwrap();
            saw.insert(ex.routed_task);
            assert_eq!(ex.mask_config, {
                let mut c = route_task(ex.routed_task);
                if ex.song_loss_mask.iter().all(|&m| m == 0) {
                    c.song_head_enabled = false;
                }
                c
            });
            if ex.routed_task == TaskId::VocalsEditing {
                assert!(ex.accomp.loss_mask.iter().all(|&m| m == 0));
            }
        }
        assert_eq!(saw.len(), 3);
    }

    #[test]
    fn song_targets_align_with_the_mix_oracle() {
        let (clips, cfg, mut rng) = setup();
        let clip = &clips[3];
        let ex =
            assemble_training_example(clip, TrainTask::SongFromLyrics, &cfg, &mut rng).unwrap();
        let n = clip.len() as i32;
        let mut any = false;
        for c in 0..ex.t {
            if ex.song_loss_mask[c] == 1 {
                any = true;
                let pos = ex.vocal.clip_pos[c];
                assert_eq!(pos, ex.accomp.clip_pos[c]);
                if pos < n {
                    assert_eq!(ex.song_target[c], clip.song[pos as usize]);
                } else {
                    assert_eq!(ex.song_target[c], EOS);
                }
            }
        }
        assert!(any);
    }
}
