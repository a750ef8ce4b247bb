use super::DatasetError;

pub const EMBEDDING_DIM: usize = 512;

pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Hashed bag-of-words embedding: each lowercase alphanumeric token adds a
/// signed unit to one of 512 buckets, then the vector is L2-normalized.
pub fn embed_instruction(text: &str) -> Result<Vec<f64>, DatasetError> {
    let mut v = vec![0.0; EMBEDDING_DIM];
    let lower = text.to_lowercase();
    let mut tokens = 0;
    for token in lower
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
    {
        let h = fnv1a(token.as_bytes());
        let bucket = (h % EMBEDDING_DIM as u64) as usize;
        let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
        v[bucket] += sign;
        tokens += 1;
    }
    if tokens == 0 {
        return Err(DatasetError::EmptyInstruction);
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        // every token cancelled against a colliding opposite-signed token
        v[0] = 1.0;
        return Ok(v);
    }
    for x in &mut v {
        *x /= norm;
    }
    Ok(v)
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}
