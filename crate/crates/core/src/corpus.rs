//! Synthetic paired-track corpus: a rule-based generator of
//! (lyrics, vocal, accompaniment, song) token sequences with a known latent
//! dependency structure, edit-pair construction, and the corpus file format.
//!
//! Latent structure per clip: a key k in [0,8) and a rhythm r in [0,4).
//! Every non-special vocal and accompaniment token id encodes its key block,
//! so k is recoverable from a single track token. Each lyric word symbol
//! expands to 2-4 vocal tokens whose offsets are drawn from a symbol-specific
//! sub-vocabulary; those draws are fresh randomness per position. The
//! accompaniment follows a periodic beat pattern in (k, r, t) plus, in the
//! default corpus, a coupling to the previous position's vocal offset. That
//! one-step lag is what a step-bounded cross-attending decoder can see and a
//! disconnected one cannot, which is what the BCA ablation measures. The
//! control corpus drops the key block and the vocal coupling entirely, so
//! both sides of the ablation face the same prediction problem.

use std::fmt;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{CoreError, CoreResult};
use crate::vocab::{
    self, KEY_BLOCK, NUM_KEYS, NUM_RHYTHMS, NUM_SPECIALS, VOCAB_ACCOMP, VOCAB_LYRICS, VOCAB_SONG,
    VOCAB_VOCAL, WORD_SYMBOLS,
};

/// Which accompaniment law a corpus uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorpusMode {
    /// Key block + beat + one-step vocal coupling.
    Default,
    /// Pure beat pattern, independent of the key and of the vocals.
    Control,
}

impl CorpusMode {
    pub fn name(self) -> &'static str {
        match self {
            CorpusMode::Default => "default",
            CorpusMode::Control => "control",
        }
    }

    pub fn parse(s: &str) -> CoreResult<Self> {
        match s {
            "default" => Ok(CorpusMode::Default),
            "control" => Ok(CorpusMode::Control),
            _ => Err(CoreError::InvalidConfig {
                detail: format!("corpus mode must be default or control, got '{s}'"),
            }),
        }
    }
}

/// One synthetic training example: aligned track token sequences plus the
/// latent generator state used by oracle checks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Clip {
    pub id: u64,
    pub key: u32,
    pub rhythm: u32,
    /// Word symbols in [0, 16).
    pub lyrics: Vec<u32>,
    pub vocal: Vec<u32>,
    pub accomp: Vec<u32>,
    pub song: Vec<u32>,
}

impl Clip {
    pub fn len(&self) -> usize {
        self.vocal.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vocal.is_empty()
    }

    /// Lyrics as encoder token ids; a dropped/absent lyric is the single
    /// null-lyric token.
    pub fn lyric_token_ids(&self, dropped: bool) -> Vec<u32> {
        if dropped || self.lyrics.is_empty() {
            vec![vocab::NULL_LYRIC]
        } else {
            self.lyrics.iter().map(|&w| vocab::word_to_lyric_token(w)).collect()
        }
    }
}

/// Tokens one word symbol expands to (symbol-specific, position-independent
/// so word spans stay recomputable from the lyrics alone).
pub fn word_len(symbol: u32) -> usize {
    2 + (symbol as usize % 3)
}

/// (start, len) of each word's token region in the vocal track.
pub fn word_spans(lyrics: &[u32]) -> Vec<(usize, usize)> {
    let mut spans = Vec::with_capacity(lyrics.len());
    let mut start = 0;
    for &w in lyrics {
        let len = word_len(w);
        spans.push((start, len));
        start += len;
    }
    spans
}

/// The four offsets of a word symbol's sub-vocabulary within a key block.
pub fn symbol_offsets(symbol: u32) -> [u32; 4] {
    let s = symbol;
    [
        (3 * s) % KEY_BLOCK as u32,
        (3 * s + 2) % KEY_BLOCK as u32,
        (3 * s + 4) % KEY_BLOCK as u32,
        (3 * s + 6) % KEY_BLOCK as u32,
    ]
}

fn vocal_token(key: u32, offset: u32) -> u32 {
    NUM_SPECIALS as u32 + key * KEY_BLOCK as u32 + offset
}

fn beat(rhythm: u32, t: usize) -> u32 {
    let period = rhythm as usize + 2;
    ((t % period) as u32 + rhythm) % KEY_BLOCK as u32
}

fn accomp_token(mode: CorpusMode, key: u32, rhythm: u32, t: usize, prev_vocal: Option<u32>) -> u32 {
    match mode {
        CorpusMode::Default => {
            let lag = match prev_vocal {
                Some(v) => (v - NUM_SPECIALS as u32) % KEY_BLOCK as u32,
                None => 0,
            };
            let psi = (beat(rhythm, t) + lag) % KEY_BLOCK as u32;
            NUM_SPECIALS as u32 + key * KEY_BLOCK as u32 + psi
        }
        CorpusMode::Control => NUM_SPECIALS as u32 + beat(rhythm, t),
    }
}

/// Deterministic injective pairing of (v mod 16, a mod 16) into the song
/// vocabulary's non-special range. Special-token inputs are rejected.
pub fn mix(v: u32, a: u32) -> CoreResult<u32> {
    if vocab::is_special(v) || vocab::is_special(a) {
        return Err(CoreError::BadCondition {
            task: "mix",
            detail: format!("special-token input ({v}, {a})"),
        });
    }
    Ok(NUM_SPECIALS as u32 + 16 * (v % 16) + (a % 16))
}

/// Inverse of [`mix`]: recovers (v mod 16, a mod 16).
pub fn mix_inverse(s: u32) -> CoreResult<(u32, u32)> {
    if (s as usize) < NUM_SPECIALS || (s as usize) >= VOCAB_SONG {
        return Err(CoreError::TokenOutOfRange { id: s, vocab: VOCAB_SONG });
    }
    let x = s - NUM_SPECIALS as u32;
    Ok((x / 16, x % 16))
}

/// Rebuild accompaniment and song tracks from (lyrics-derived) vocals and the
/// latent state. This is the generator's own law, reused by edit-pair
/// regeneration and by oracle tests.
pub fn derive_tracks(mode: CorpusMode, key: u32, rhythm: u32, vocal: &[u32]) -> (Vec<u32>, Vec<u32>) {
    let mut accomp = Vec::with_capacity(vocal.len());
    let mut song = Vec::with_capacity(vocal.len());
    for (t, &v) in vocal.iter().enumerate() {
        let prev = if t == 0 { None } else { Some(vocal[t - 1]) };
        let a = accomp_token(mode, key, rhythm, t, prev);
        accomp.push(a);
        song.push(mix(v, a).expect("generator emits non-special tokens"));
    }
    (accomp, song)
}

/// Generate one clip. Lyrics (4-12 words), key and rhythm come from `rng`;
/// vocal expansion offsets are fresh draws per position. Words are dropped
/// from the tail if the expansion would exceed `max_len`.
pub fn gen_clip<R: Rng>(rng: &mut R, id: u64, max_len: usize, mode: CorpusMode) -> Clip {
    let word_count = rng.gen_range(4..=12usize);
    let mut lyrics: Vec<u32> = (0..word_count)
        .map(|_| rng.gen_range(0..WORD_SYMBOLS as u32))
        .collect();
    let key = rng.gen_range(0..NUM_KEYS as u32);
    let rhythm = rng.gen_range(0..NUM_RHYTHMS as u32);
    while lyrics.len() > 2 && lyrics.iter().map(|&w| word_len(w)).sum::<usize>() > max_len {
        lyrics.pop();
    }
    let mut vocal = Vec::new();
    for &w in &lyrics {
        let offs = symbol_offsets(w);
        for _ in 0..word_len(w) {
            let o = offs[rng.gen_range(0..offs.len())];
            vocal.push(vocal_token(key, o));
        }
    }
    let (accomp, song) = derive_tracks(mode, key, rhythm, &vocal);
    Clip {
        id,
        key,
        rhythm,
        lyrics,
        vocal,
        accomp,
        song,
    }
}

fn clip_rng(seed: u64, id: u64) -> ChaCha8Rng {
    // splitmix-style stream separation per clip id
    let mut z = seed ^ id.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    ChaCha8Rng::seed_from_u64(z ^ (z >> 31))
}

/// The full corpus is a pure function of (seed, size); clips are independent
/// across ids and may generate in parallel.
pub fn gen_corpus(seed: u64, size: usize, max_len: usize, mode: CorpusMode) -> Vec<Clip> {
    (0..size as u64)
        .map(|id| gen_clip(&mut clip_rng(seed, id), id, max_len, mode))
        .collect()
}

// ---- edit pairs ------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EditType {
    Insertion,
    Deletion,
    Substitution,
}

impl fmt::Display for EditType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            EditType::Insertion => "insertion",
            EditType::Deletion => "deletion",
            EditType::Substitution => "substitution",
        };
        f.write_str(s)
    }
}

/// An edit pair: the original clip, the edited lyrics, and the regenerated
/// ground truth for the edited clip (same key and rhythm, so the unedited
/// word regions keep their exact vocal tokens).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EditExample {
    pub original: Clip,
    pub edited: Clip,
    pub edit_type: EditType,
    /// Word index in the original lyrics where the edit applies.
    pub span_start: usize,
    /// Words inserted / deleted / substituted, always within 1..=15.
    pub span_len: usize,
}

/// Hard cap on edited lyric length so the editing layout fits the context.
pub const MAX_EDITED_WORDS: usize = 24;
pub const MAX_EDIT_SPAN_WORDS: usize = 15;

/// Build the edited clip given edited lyrics, copying vocal expansions for
/// words retained from the original and drawing fresh expansions for new
/// words. `origin[j]` is `Some(orig_word_index)` for retained words.
fn rebuild_clip<R: Rng>(
    original: &Clip,
    edited_lyrics: &[u32],
    origin: &[Option<usize>],
    rng: &mut R,
) -> Clip {
    debug_assert_eq!(edited_lyrics.len(), origin.len());
    let orig_spans = word_spans(&original.lyrics);
    let mut vocal = Vec::new();
    for (j, &w) in edited_lyrics.iter().enumerate() {
        match origin[j] {
            Some(oj) => {
                debug_assert_eq!(original.lyrics[oj], w);
                let (start, len) = orig_spans[oj];
                vocal.extend_from_slice(&original.vocal[start..start + len]);
            }
            None => {
                let offs = symbol_offsets(w);
                for _ in 0..word_len(w) {
                    let o = offs[rng.gen_range(0..offs.len())];
                    vocal.push(vocal_token(original.key, o));
                }
            }
        }
    }
    let (accomp, song) = derive_tracks(CorpusMode::Default, original.key, original.rhythm, &vocal);
    Clip {
        id: original.id,
        key: original.key,
        rhythm: original.rhythm,
        lyrics: edited_lyrics.to_vec(),
        vocal,
        accomp,
        song,
    }
}

/// Draw one edit pair: uniform edit type, span of 1-15 words clamped to the
/// lyric length. Deleting every word is rejected.
pub fn make_edit_example<R: Rng>(clip: &Clip, rng: &mut R) -> CoreResult<EditExample> {
    let w = clip.lyrics.len();
    if w < 2 {
        return Err(CoreError::BadEditSpan {
            detail: "clip must have at least 2 words".into(),
        });
    }
    let edit_type = match rng.gen_range(0..3) {
        0 => EditType::Insertion,
        1 => EditType::Deletion,
        _ => EditType::Substitution,
    };
    match edit_type {
        EditType::Deletion => {
            // keep at least one word
            let max_span = MAX_EDIT_SPAN_WORDS.min(w - 1);
            let span_len = rng.gen_range(1..=max_span);
            let span_start = rng.gen_range(0..=w - span_len);
            let mut lyrics = Vec::new();
            let mut origin = Vec::new();
            for (j, &sym) in clip.lyrics.iter().enumerate() {
                if j < span_start || j >= span_start + span_len {
                    lyrics.push(sym);
                    origin.push(Some(j));
                }
            }
            let edited = rebuild_clip(clip, &lyrics, &origin, rng);
            Ok(EditExample {
                original: clip.clone(),
                edited,
                edit_type,
                span_start,
                span_len,
            })
        }
        EditType::Insertion => {
            let max_span = MAX_EDIT_SPAN_WORDS.min(MAX_EDITED_WORDS.saturating_sub(w)).max(1);
            let span_len = rng.gen_range(1..=max_span);
            let span_start = rng.gen_range(0..=w);
            let mut lyrics = Vec::new();
            let mut origin = Vec::new();
            for j in 0..span_start {
                lyrics.push(clip.lyrics[j]);
                origin.push(Some(j));
            }
            for _ in 0..span_len {
                lyrics.push(rng.gen_range(0..WORD_SYMBOLS as u32));
                origin.push(None);
            }
            for j in span_start..w {
                lyrics.push(clip.lyrics[j]);
                origin.push(Some(j));
            }
            let edited = rebuild_clip(clip, &lyrics, &origin, rng);
            Ok(EditExample {
                original: clip.clone(),
                edited,
                edit_type,
                span_start,
                span_len,
            })
        }
        EditType::Substitution => {
            let max_span = MAX_EDIT_SPAN_WORDS.min(w);
            let span_len = rng.gen_range(1..=max_span);
            let span_start = rng.gen_range(0..=w - span_len);
            let mut lyrics = clip.lyrics.clone();
            let mut origin: Vec<Option<usize>> = (0..w).map(Some).collect();
            for j in span_start..span_start + span_len {
                lyrics[j] = rng.gen_range(0..WORD_SYMBOLS as u32);
                origin[j] = None;
            }
            let edited = rebuild_clip(clip, &lyrics, &origin, rng);
            Ok(EditExample {
                original: clip.clone(),
                edited,
                edit_type,
                span_start,
                span_len,
            })
        }
    }
}

/// Rebuild a clip for externally supplied edited lyrics (the CLI edit path).
/// Words outside the declared span are matched positionally to the original
/// and keep their token expansions; span words are regenerated.
pub fn apply_lyric_edit<R: Rng>(
    clip: &Clip,
    edited_lyrics: &[u32],
    span_start: usize,
    rng: &mut R,
) -> CoreResult<Clip> {
    let w = clip.lyrics.len();
    let we = edited_lyrics.len();
    if we == 0 || we > MAX_EDITED_WORDS {
        return Err(CoreError::BadEditSpan {
            detail: format!("edited lyrics must have 1..={MAX_EDITED_WORDS} words, got {we}"),
        });
    }
    if span_start > w || span_start > we {
        return Err(CoreError::BadEditSpan {
            detail: format!("span start {span_start} outside lyric bounds"),
        });
    }
    // Longest matching suffix behind the span, then everything between is the
    // edited region.
    let mut tail = 0;
    while tail < (w - span_start).min(we - span_start)
        && clip.lyrics[w - 1 - tail] == edited_lyrics[we - 1 - tail]
    {
        tail += 1;
    }
    let span_len_edited = we - span_start - tail;
    let span_len_original = w - span_start - tail;
    if span_len_edited.max(span_len_original) > MAX_EDIT_SPAN_WORDS {
        return Err(CoreError::BadEditSpan {
            detail: format!(
                "edit spans {span_len_original}->{span_len_edited} words; the limit is {MAX_EDIT_SPAN_WORDS}"
            ),
        });
    }
    for j in 0..span_start {
        if clip.lyrics[j] != edited_lyrics[j] {
            return Err(CoreError::BadEditSpan {
                detail: format!("lyrics differ at word {j}, before the declared span"),
            });
        }
    }
    let mut origin: Vec<Option<usize>> = Vec::with_capacity(we);
    for j in 0..span_start {
        origin.push(Some(j));
    }
    for _ in 0..span_len_edited {
        origin.push(None);
    }
    for t in (0..tail).rev() {
        origin.push(Some(w - 1 - t));
    }
    Ok(rebuild_clip(clip, edited_lyrics, &origin, rng))
}

// ---- corpus file format ------------------------------------------------------

const CORPUS_MAGIC: &str = "dslm-corpus v1";

/// Render the newline-delimited corpus format: a one-line header with format
/// version and vocab sizes, then one clip per line.
pub fn render_corpus(clips: &[Clip]) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{CORPUS_MAGIC} vocab_lyrics={VOCAB_LYRICS} vocab_vocal={VOCAB_VOCAL} vocab_accomp={VOCAB_ACCOMP} vocab_song={VOCAB_SONG}\n"
    ));
    for c in clips {
        out.push_str(&format!(
            "id={}|key={}|rhythm={}|lyrics={}|vocal={}|accomp={}|song={}\n",
            c.id,
            c.key,
            c.rhythm,
            join_ids(&c.lyrics),
            join_ids(&c.vocal),
            join_ids(&c.accomp),
            join_ids(&c.song),
        ));
    }
    out
}

fn join_ids(ids: &[u32]) -> String {
    ids.iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn write_corpus(path: &Path, clips: &[Clip]) -> CoreResult<()> {
    fs::write(path, render_corpus(clips)).map_err(|e| CoreError::Io {
        path: path.display().to_string(),
        detail: e.to_string(),
    })
}

pub fn parse_corpus(path_label: &str, text: &str) -> CoreResult<Vec<Clip>> {
    let malformed = |line: usize, detail: String| CoreError::Malformed {
        path: path_label.to_string(),
        line,
        detail,
    };
    let mut lines = text.lines().enumerate();
    let Some((_, header)) = lines.next() else {
        return Err(malformed(1, "missing header".into()));
    };
    if !header.starts_with(CORPUS_MAGIC) {
        return Err(malformed(1, format!("bad header '{header}'")));
    }
    let mut clips = Vec::new();
    for (i, line) in lines {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = std::collections::HashMap::new();
        for part in line.split('|') {
            let Some((k, v)) = part.split_once('=') else {
                return Err(malformed(lineno, format!("field '{part}' is not key=value")));
            };
            fields.insert(k.to_string(), v.to_string());
        }
        let get = |k: &str| -> CoreResult<String> {
            fields
                .get(k)
                .cloned()
                .ok_or_else(|| malformed(lineno, format!("missing field '{k}'")))
        };
        let parse_ids = |k: &str, max: usize| -> CoreResult<Vec<u32>> {
            let raw = get(k)?;
            let mut out = Vec::new();
            for tok in raw.split_whitespace() {
                let v: u32 = tok
                    .parse()
                    .map_err(|e| malformed(lineno, format!("field '{k}': {e}")))?;
                if v as usize >= max {
                    return Err(malformed(
                        lineno,
                        format!("field '{k}': token {v} out of range {max}"),
                    ));
                }
                out.push(v);
            }
            Ok(out)
        };
        let clip = Clip {
            id: get("id")?
                .parse()
                .map_err(|e| malformed(lineno, format!("field 'id': {e}")))?,
            key: get("key")?
                .parse()
                .map_err(|e| malformed(lineno, format!("field 'key': {e}")))?,
            rhythm: get("rhythm")?
                .parse()
                .map_err(|e| malformed(lineno, format!("field 'rhythm': {e}")))?,
            lyrics: parse_ids("lyrics", WORD_SYMBOLS)?,
            vocal: parse_ids("vocal", VOCAB_VOCAL)?,
            accomp: parse_ids("accomp", VOCAB_ACCOMP)?,
            song: parse_ids("song", VOCAB_SONG)?,
        };
        if clip.vocal.len() != clip.accomp.len() || clip.vocal.len() != clip.song.len() {
            return Err(malformed(
                lineno,
                format!(
                    "clip {}: track lengths differ ({}/{}/{})",
                    clip.id,
                    clip.vocal.len(),
                    clip.accomp.len(),
                    clip.song.len()
                ),
            ));
        }
        clips.push(clip);
    }
    Ok(clips)
}

pub fn read_corpus(path: &Path) -> CoreResult<Vec<Clip>> {
    let text = fs::read_to_string(path).map_err(|e| CoreError::Io {
        path: path.display().to_string(),
        detail: e.to_string(),
    })?;
    parse_corpus(&path.display().to_string(), &text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corpus_is_a_pure_function_of_seed_and_size() {
        let a = gen_corpus(7, 20, 48, CorpusMode::Default);
        let b = gen_corpus(7, 20, 48, CorpusMode::Default);
        assert_eq!(a, b);
        let c = gen_corpus(8, 20, 48, CorpusMode::Default);
        assert_ne!(a, c);
    }

    #[test]
    fn key_recoverable_from_vocal_alone_on_10k_clips() {
        for clip in gen_corpus(3, 10_000, 48, CorpusMode::Default) {
            for &v in &clip.vocal {
                assert_eq!(vocab::token_key(v), Some(clip.key));
            }
        }
    }

    #[test]
    fn song_is_the_mix_of_the_tracks() {
        for clip in gen_corpus(5, 200, 48, CorpusMode::Default) {
            assert_eq!(clip.vocal.len(), clip.accomp.len());
            assert_eq!(clip.vocal.len(), clip.song.len());
            for t in 0..clip.len() {
                assert_eq!(clip.song[t], mix(clip.vocal[t], clip.accomp[t]).unwrap());
            }
            let (accomp, song) =
                derive_tracks(CorpusMode::Default, clip.key, clip.rhythm, &clip.vocal);
            assert_eq!(accomp, clip.accomp);
            assert_eq!(song, clip.song);
        }
    }

    #[test]
    fn control_mode_accomp_ignores_key_and_vocals() {
        for clip in gen_corpus(11, 100, 48, CorpusMode::Control) {
            for (t, &a) in clip.accomp.iter().enumerate() {
                assert_eq!(a, NUM_SPECIALS as u32 + beat(clip.rhythm, t));
            }
        }
    }

    #[test]
    fn mix_is_injective_with_inverse_over_the_full_grid() {
        let mut seen = std::collections::HashSet::new();
        for vr in 0..16u32 {
            for ar in 0..16u32 {
                // arbitrary representatives with the wanted residues
                let v = 16 + vr;
                let a = 32 + ar;
                let s = mix(v, a).unwrap();
                assert_eq!(s, mix(v, a).unwrap());
                assert!(seen.insert(s), "collision at ({vr},{ar})");
                assert!((s as usize) >= NUM_SPECIALS && (s as usize) < VOCAB_SONG);
                assert_eq!(mix_inverse(s).unwrap(), (v % 16, a % 16));
            }
        }
        assert_eq!(seen.len(), 256);
        assert!(mix(vocab::PAD, 32).is_err());
    }

    #[test]
    fn edit_spans_and_types_over_10k_samples() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let clips = gen_corpus(19, 64, 48, CorpusMode::Default);
        let mut saw = [false; 3];
        for i in 0..10_000 {
            let clip = &clips[i % clips.len()];
            let ex = make_edit_example(clip, &mut rng).unwrap();
            assert!((1..=15).contains(&ex.span_len), "span {}", ex.span_len);
            saw[match ex.edit_type {
                EditType::Insertion => 0,
                EditType::Deletion => 1,
                EditType::Substitution => 2,
            }] = true;
            assert!(!ex.edited.lyrics.is_empty());
            assert!(ex.edited.lyrics.len() <= MAX_EDITED_WORDS);
        }
        assert!(saw.iter().all(|&s| s), "all three edit types must occur");
    }

    #[test]
    fn deletion_never_removes_every_word() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let clips = gen_corpus(29, 16, 48, CorpusMode::Default);
        for i in 0..2000 {
            let ex = make_edit_example(&clips[i % clips.len()], &mut rng).unwrap();
            if ex.edit_type == EditType::Deletion {
                assert!(ex.span_len < ex.original.lyrics.len());
            }
        }
        let tiny = Clip {
            id: 0,
            key: 0,
            rhythm: 0,
            lyrics: vec![3],
            vocal: vec![8, 8, 8],
            accomp: vec![8, 8, 8],
            song: vec![8, 8, 8],
        };
        assert!(make_edit_example(&tiny, &mut rng).is_err());
    }

    #[test]
    fn substitution_of_one_word_changes_only_that_word_region_in_vocal() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let clips = gen_corpus(37, 32, 48, CorpusMode::Default);
        let mut checked = 0;
        for i in 0..4000 {
            let clip = &clips[i % clips.len()];
            let ex = make_edit_example(clip, &mut rng).unwrap();
            if ex.edit_type != EditType::Substitution || ex.span_len != 1 {
                continue;
            }
            checked += 1;
            let spans = word_spans(&clip.lyrics);
            let espans = word_spans(&ex.edited.lyrics);
            for (j, &(s, l)) in spans.iter().enumerate() {
                if j == ex.span_start {
                    continue;
                }
                let (es, el) = espans[j];
                assert_eq!(l, el);
                assert_eq!(&clip.vocal[s..s + l], &ex.edited.vocal[es..es + el]);
            }
        }
        assert!(checked > 50, "not enough single-word substitutions sampled");
    }

    #[test]
    fn apply_lyric_edit_identity_keeps_the_clip() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let clip = &gen_corpus(43, 4, 48, CorpusMode::Default)[2];
        let same = apply_lyric_edit(clip, &clip.lyrics.clone(), 0, &mut rng).unwrap();
        assert_eq!(&same, clip);
    }

    #[test]
    fn apply_lyric_edit_rejects_oversized_span() {
        let mut rng = ChaCha8Rng::seed_from_u64(47);
        let mut clip = gen_corpus(53, 4, 48, CorpusMode::Default)[0].clone();
        clip.lyrics = (0..16).map(|i| i as u32 % 16).collect();
        let spans = word_spans(&clip.lyrics);
        let total = spans.last().map(|&(s, l)| s + l).unwrap();
        clip.vocal = (0..total).map(|_| 8).collect();
        let (a, s) = derive_tracks(CorpusMode::Default, clip.key, clip.rhythm, &clip.vocal);
        clip.accomp = a;
        clip.song = s;
        // replace all 16 words: span of 16 exceeds the 15-word limit
        let edited: Vec<u32> = (0..16).map(|i| (i as u32 + 1) % 16).collect();
        let err = apply_lyric_edit(&clip, &edited, 0, &mut rng).unwrap_err();
        assert!(matches!(err, CoreError::BadEditSpan { .. }));
    }

    #[test]
    fn corpus_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.corpus");
        let clips = gen_corpus(61, 100, 48, CorpusMode::Default);
        write_corpus(&path, &clips).unwrap();
        let back = read_corpus(&path).unwrap();
        assert_eq!(clips, back);
        // byte determinism
        let r1 = render_corpus(&clips);
        let r2 = render_corpus(&clips);
        assert_eq!(r1, r2);
    }

    #[test]
    fn empty_corpus_file_gives_empty_clip_list() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.corpus");
        write_corpus(&path, &[]).unwrap();
        assert!(read_corpus(&path).unwrap().is_empty());
    }

    #[test]
    fn truncated_record_is_rejected_with_line_number() {
        let clips = gen_corpus(67, 3, 48, CorpusMode::Default);
        let mut text = render_corpus(&clips);
        // chop the last record mid-field
        let cut = text.len() - 20;
        text.truncate(cut);
        let err = parse_corpus("trunc.corpus", &text).unwrap_err();
        match err {
            CoreError::Malformed { path, line, .. } => {
                assert_eq!(path, "trunc.corpus");
                assert_eq!(line, 4);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }
}
