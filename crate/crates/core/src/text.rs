//! Character tokenizer for text scripts.

use crate::error::{Error, Result};

pub const PAD_ID: usize = 0;
pub const EOS_ID: usize = 1;

const SYMBOLS: &str = " 'abcdefghijklmnopqrstuvwxyz0123456789";

/// Total number of token ids, including pad and eos.
pub const VOCAB_SIZE: usize = 2 + SYMBOLS.len();

/// Token ids for one script; always terminated by [`EOS_ID`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CharacterSequence {
    ids: Vec<usize>,
}

impl CharacterSequence {
    pub fn from_ids(ids: Vec<usize>) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::EmptyInput("character sequence has no tokens".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&id| id >= VOCAB_SIZE) {
            return Err(Error::Validation(format!(
                "token id {bad} outside vocabulary of {VOCAB_SIZE}"
            )));
        }
        if ids.last() != Some(&EOS_ID) {
            return Err(Error::Validation("character sequence must end in eos".into()));
        }
        Ok(Self { ids })
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Decodes back to text, without the trailing eos.
    pub fn to_text(&self) -> String {
        self.ids.iter().filter_map(|&id| symbol_for(id)).collect()
    }
}

fn id_for(c: char) -> Option<usize> {
    SYMBOLS.chars().position(|s| s == c).map(|p| p + 2)
}

fn symbol_for(id: usize) -> Option<char> {
    id.checked_sub(2).and_then(|p| SYMBOLS.chars().nth(p))
}

/// Lowercases `text`, drops characters outside the vocabulary and appends eos.
pub fn char_tokenize(text: &str) -> Result<CharacterSequence> {
    let mut ids: Vec<usize> = text.chars().flat_map(char::to_lowercase).filter_map(id_for).collect();
    if ids.is_empty() {
        return Err(Error::EmptyInput(format!("no supported characters in {text:?}")));
    }
    ids.push(EOS_ID);
    Ok(CharacterSequence { ids })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn bin_blue() {
        let seq = char_tokenize("bin blue").unwrap();
        assert_eq!(seq.len(), 9);
        let expect: Vec<usize> = "bin blue".chars().map(|c| id_for(c).unwrap()).chain([EOS_ID]).collect();
        assert_eq!(seq.ids(), &expect[..]);
        assert_eq!(seq.ids()[3], id_for(' ').unwrap());
    }

    #[test]
    fn case_folding_and_filtering() {
        assert_eq!(char_tokenize("A").unwrap(), char_tokenize("a").unwrap());
        assert_eq!(char_tokenize("a✓b").unwrap(), char_tokenize("ab").unwrap());
        assert_eq!(char_tokenize("ab").unwrap().len(), 3);
    }

    #[test]
    fn empty_after_filtering() {
        assert!(matches!(char_tokenize("✓✓"), Err(Error::EmptyInput(_))));
        assert!(matches!(char_tokenize(""), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn from_ids_validates() {
        assert!(CharacterSequence::from_ids(vec![VOCAB_SIZE, EOS_ID]).is_err());
        assert!(CharacterSequence::from_ids(vec![5]).is_err());
        assert!(CharacterSequence::from_ids(vec![5, EOS_ID]).is_ok());
    }

    proptest! {
        #[test]
        fn idempotent_on_own_alphabet(s in "[a-z0-9 ']{1,40}") {
            let once = char_tokenize(&s).unwrap();
            let twice = char_tokenize(&once.to_text()).unwrap();
            prop_assert_eq!(once, twice);
        }

        #[test]
        fn ids_in_range(s in "\\PC{1,40}") {
            if let Ok(seq) = char_tokenize(&s) {
                prop_assert!(seq.ids().iter().all(|&id| id < VOCAB_SIZE));
                prop_assert_eq!(*seq.ids().last().unwrap(), EOS_ID);
            }
        }
    }
}
