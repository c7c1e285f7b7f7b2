use crate::error::{Error, Result};

const BETA: f64 = 1.2;

fn lcs<S: AsRef<str>>(a: &[S], b: &[S]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x.as_ref() == y.as_ref() {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS F-measure with the best precision and best recall over references.
pub fn rouge_l<S: AsRef<str>, R: AsRef<[S]>>(candidate: &[S], references: &[R]) -> Result<f64> {
    if references.is_empty() {
        return Err(Error::Empty("rouge references"));
    }
    if candidate.is_empty() {
        return Ok(0.0);
    }
    let mut p_max = 0.0f64;
    let mut r_max = 0.0f64;
    for r in references {
        let r = r.as_ref();
        let l = lcs(r, candidate) as f64;
        p_max = p_max.max(l / candidate.len() as f64);
        if !r.is_empty() {
            r_max = r_max.max(l / r.len() as f64);
        }
    }
    if p_max == 0.0 || r_max == 0.0 {
        return Ok(0.0);
    }
    let b2 = BETA * BETA;
    Ok((1.0 + b2) * p_max * r_max / (r_max + b2 * p_max))
}
