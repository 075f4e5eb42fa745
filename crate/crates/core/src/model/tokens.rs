use std::path::Path;

use crate::error::{LabError, Result};

/// Non-empty list of token ids, each below the vocabulary size it was checked against.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence(Vec<u32>);

impl TokenSequence {
    pub fn new(ids: Vec<u32>, vocab_size: usize) -> Result<Self> {
        if ids.is_empty() {
            return Err(LabError::Input("token sequence is empty".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&id| id as usize >= vocab_size) {
            return Err(LabError::Input(format!(
                "token id {bad} is outside the vocabulary of {vocab_size}"
            )));
        }
        Ok(TokenSequence(ids))
    }

    pub fn ids(&self) -> &[u32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn prefix(&self, n: usize) -> Option<TokenSequence> {
        (n >= 1 && n <= self.0.len()).then(|| TokenSequence(self.0[..n].to_vec()))
    }
}

/// Byte-level tokenizer: byte `b` becomes id `b`.
pub fn tokenize_bytes(text: &[u8], vocab_size: usize) -> Result<TokenSequence> {
    if vocab_size < 256 {
        return Err(LabError::Config(format!(
            "byte tokenizer needs vocab_size >= 256, got {vocab_size}"
        )));
    }
    TokenSequence::new(text.iter().map(|&b| u32::from(b)).collect(), vocab_size)
}

/// Parses newline-delimited, space-separated decimal id lists. Blank lines are skipped.
pub fn parse_token_lines(text: &str, vocab_size: usize) -> Result<Vec<TokenSequence>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let ids = line
            .split_whitespace()
            .map(|tok| {
                let id: u32 = tok.parse().map_err(|_| LabError::Ingestion {
                    line: i + 1,
                    reason: format!("{tok:?} is not a decimal token id"),
                })?;
                if id as usize >= vocab_size {
                    return Err(LabError::Ingestion {
                        line: i + 1,
                        reason: format!("id {id} >= vocab_size {vocab_size}"),
                    });
                }
                Ok(id)
            })
            .collect::<Result<Vec<u32>>>()?;
        out.push(TokenSequence(ids));
    }
    Ok(out)
}

pub fn load_token_file(path: impl AsRef<Path>, vocab_size: usize) -> Result<Vec<TokenSequence>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
    parse_token_lines(&text, vocab_size)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bytes_map_to_ids() {
        assert_eq!(tokenize_bytes(b"AB", 256).unwrap().ids(), &[65, 66]);
        assert!(tokenize_bytes(b"AB", 128).is_err());
    }

    #[test]
    fn token_file_lines() {
        let seqs = parse_token_lines("1 2 3\n4 5", 256).unwrap();
        assert_eq!(seqs.len(), 2);
        assert_eq!(seqs[0].ids(), &[1, 2, 3]);
        assert_eq!(seqs[1].ids(), &[4, 5]);

        let seqs = parse_token_lines("1 2\n\n   \n3\n", 256).unwrap();
        assert_eq!(seqs.len(), 2);
    }

    #[test]
    fn out_of_vocab_id_is_ingestion_error() {
        let err = parse_token_lines("1 2\n3 300\n", 256).unwrap_err();
        assert!(matches!(err, LabError::Ingestion { line: 2, .. }));
        assert!(parse_token_lines("1 x", 256).is_err());
    }
}
