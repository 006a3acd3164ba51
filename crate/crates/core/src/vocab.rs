//! Token-id layout shared by every stream vocabulary.
//!
//! Ids 0..8 are reserved for special tokens in all vocabularies; the
//! non-special region starts at [`NUM_SPECIALS`].

/// Padding (excluded from loss and attention keys).
pub const PAD: u32 = 0;
/// Start of a teacher-forced target region.
pub const BOS: u32 = 1;
/// End of sequence.
pub const EOS: u32 = 2;
/// Separator between a prompt prefix and the target region.
pub const SEP: u32 = 3;
/// Separator between an editing suffix span and the regenerated target.
pub const EDIT: u32 = 4;
/// Replacement for masked input tokens under the non-causal strategy.
pub const MASK: u32 = 5;
/// Stands in for dropped / absent lyrics (lyrics vocabulary only).
pub const NULL_LYRIC: u32 = 6;

pub const NUM_SPECIALS: usize = 8;

/// Word-symbol alphabet size of the synthetic lyrics.
pub const WORD_SYMBOLS: usize = 16;
/// Lyrics vocabulary: specials + word symbols.
pub const VOCAB_LYRICS: usize = NUM_SPECIALS + WORD_SYMBOLS;

/// Latent keys; every non-special vocal/accomp token id encodes its key.
pub const NUM_KEYS: usize = 8;
/// Latent rhythm patterns.
pub const NUM_RHYTHMS: usize = 4;
/// Tokens per key block in the vocal/accomp vocabularies.
pub const KEY_BLOCK: usize = 7;

/// Vocal vocabulary: 8 specials + 8 keys x 7 offsets.
pub const VOCAB_VOCAL: usize = NUM_SPECIALS + NUM_KEYS * KEY_BLOCK;
/// Accompaniment vocabulary, same block layout as vocal.
pub const VOCAB_ACCOMP: usize = NUM_SPECIALS + NUM_KEYS * KEY_BLOCK;
/// Song vocabulary: 8 specials + the full 16x16 injective mix range.
pub const VOCAB_SONG: usize = NUM_SPECIALS + 16 * 16;

/// Word symbol (0..16) to lyrics token id.
pub fn word_to_lyric_token(w: u32) -> u32 {
    debug_assert!((w as usize) < WORD_SYMBOLS);
    NUM_SPECIALS as u32 + w
}

pub fn lyric_token_to_word(id: u32) -> Option<u32> {
    if (id as usize) >= NUM_SPECIALS && (id as usize) < VOCAB_LYRICS {
        Some(id - NUM_SPECIALS as u32)
    } else {
        None
    }
}

pub fn is_special(id: u32) -> bool {
    (id as usize) < NUM_SPECIALS
}

/// Key encoded in a non-special vocal/accomp token.
pub fn token_key(id: u32) -> Option<u32> {
    if is_special(id) {
        return None;
    }
    let off = id as usize - NUM_SPECIALS;
    if off < NUM_KEYS * KEY_BLOCK {
        Some((off / KEY_BLOCK) as u32)
    } else {
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn key_is_recoverable_from_any_track_token() {
        for k in 0..NUM_KEYS as u32 {
            for o in 0..KEY_BLOCK as u32 {
                let id = NUM_SPECIALS as u32 + k * KEY_BLOCK as u32 + o;
                assert_eq!(token_key(id), Some(k));
            }
        }
        assert_eq!(token_key(PAD), None);
    }
}
