//! Word-vector loading from the word2vec text format: a `count dim`
//! header line, then one `token v1 ... vdim` line per word.

use std::collections::HashMap;
use std::path::Path;

use ndarray::Array1;

use super::{SemError, WordVectorTable};

/// Parse the word2vec text format, keeping only the tokens of interest.
fn parse_needed(
    text: &str,
    needed: &[&str],
    expected_dim: Option<usize>,
) -> Result<HashMap<String, Array1<f64>>, SemError> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| SemError::BadEmbeddingsFile { line: 1, message: "empty file".into() })?;
    let mut parts = header.split_whitespace();
    let _count: usize = parts
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| SemError::BadEmbeddingsFile { line: 1, message: "bad count".into() })?;
    let dim: usize = parts
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| SemError::BadEmbeddingsFile { line: 1, message: "bad dimension".into() })?;
    if let Some(expected) = expected_dim {
        if dim != expected {
            return Err(SemError::EmbeddingDim { expected, got: dim });
        }
    }

    let mut out = HashMap::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split_whitespace();
        let token = fields.next().ok_or_else(|| SemError::BadEmbeddingsFile {
            line: i + 1,
            message: "missing token".into(),
        })?;
        if !needed.contains(&token) || out.contains_key(token) {
            continue;
        }
        let values: Result<Vec<f64>, _> = fields.map(|f| f.parse::<f64>()).collect();
        let values = values.map_err(|e| SemError::BadEmbeddingsFile {
            line: i + 1,
            message: e.to_string(),
        })?;
        if values.len() != dim {
            return Err(SemError::BadEmbeddingsFile {
                line: i + 1,
                message: format!("expected {dim} values, got {}", values.len()),
            });
        }
        out.insert(token.to_string(), Array1::from(values));
    }
    Ok(out)
}

/// Build a [`WordVectorTable`] from an embeddings file: one vector per
/// class name plus the background token. Rows come out l2-normalized.
pub fn load_embeddings(
    path: &Path,
    seen_names: &[String],
    unseen_names: &[String],
    background_token: &str,
    expected_dim: Option<usize>,
) -> Result<WordVectorTable, SemError> {
    let text = std::fs::read_to_string(path)?;
    load_embeddings_from_str(&text, seen_names, unseen_names, background_token, expected_dim)
}

pub fn load_embeddings_from_str(
    text: &str,
    seen_names: &[String],
    unseen_names: &[String],
    background_token: &str,
    expected_dim: Option<usize>,
) -> Result<WordVectorTable, SemError> {
    let mut needed: Vec<&str> = seen_names.iter().chain(unseen_names).map(|s| s.as_str()).collect();
    needed.push(background_token);
    let vectors = parse_needed(text, &needed, expected_dim)?;
    let get = |token: &str| -> Result<Array1<f64>, SemError> {
        vectors
            .get(token)
            .cloned()
            .ok_or_else(|| SemError::MissingToken(token.to_string()))
    };
    let background = get(background_token)?;
    let seen: Vec<(String, Array1<f64>)> = seen_names
        .iter()
        .map(|n| Ok((n.clone(), get(n)?)))
        .collect::<Result<_, SemError>>()?;
    let unseen: Vec<(String, Array1<f64>)> = unseen_names
        .iter()
        .map(|n| Ok((n.clone(), get(n)?)))
        .collect::<Result<_, SemError>>()?;
    WordVectorTable::from_vectors(background, seen, unseen)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    const FILE: &str = "4 3\n\
        background 1 0 0\n\
        cat 3 4 0\n\
        dog 0 1 0\n\
        zebra 0 0 2\n";

    #[test]
    fn normalizes_rows() {
        let table = load_embeddings_from_str(
            FILE,
            &["cat".into(), "dog".into()],
            &["zebra".into()],
            "background",
            Some(3),
        )
        .unwrap();
        let seen = table.matrix(super::super::Branch::Seen);
        // cat (3,4,0) -> (0.6,0.8,0).
        assert_abs_diff_eq!(seen[[1, 0]], 0.6, epsilon = 1e-12);
        assert_abs_diff_eq!(seen[[1, 1]], 0.8, epsilon = 1e-12);
        // dog was already unit length.
        assert_abs_diff_eq!(seen[[2, 1]], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn missing_token_is_an_error() {
        let err = load_embeddings_from_str(
            FILE,
            &["cat".into(), "horse".into()],
            &["zebra".into()],
            "background",
            None,
        )
        .unwrap_err();
        assert!(matches!(err, SemError::MissingToken(t) if t == "horse"));
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let err = load_embeddings_from_str(FILE, &["cat".into()], &["zebra".into()], "background", Some(300))
            .unwrap_err();
        assert!(matches!(err, SemError::EmbeddingDim { expected: 300, got: 3 }));
    }

    #[test]
    fn zero_vector_rejected() {
        let text = "2 2\nbackground 0 0\ncat 1 0\n";
        let err = load_embeddings_from_str(text, &["cat".into()], &["cat2".into()], "background", None);
        // cat2 missing reported first; use a file where the zero vector is hit.
        assert!(err.is_err());
        let text = "3 2\nbackground 0 0\ncat 1 0\nzebra 0 1\n";
        let err = load_embeddings_from_str(text, &["cat".into()], &["zebra".into()], "background", None)
            .unwrap_err();
        assert!(matches!(err, SemError::ZeroVector(_)));
    }
}
