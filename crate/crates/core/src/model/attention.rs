use crate::diffcore::{DiffError, Graph, Var};

/// Scaled dot-product attention of `query[B, C]` over `keys[B, N, C]`.
/// `mask` is an additive `[B, N]` constant (0 or a large negative value).
/// Returns `(weights[B, N], context[B, C])`.
pub fn dot_attention(
    g: &mut Graph,
    query: Var,
    keys: Var,
    mask: Option<Var>,
) -> Result<(Var, Var), DiffError> {
    let c = g.value(query).last_dim();
    let scores = g.batch_dot(keys, query)?;
    let scores = g.scale(scores, 1.0 / (c as f64).sqrt())?;
    let scores = match mask {
        Some(m) => g.add(scores, m)?,
        None => scores,
    };
    let weights = g.softmax(scores, 1)?;
    let context = g.weighted_sum(weights, keys)?;
    Ok((weights, context))
}

/// Additive attention `softmax(v · tanh(projected_keys + projected_query))`
/// over `values[B, N, C]`; `projected_keys` is `[B, N, A]`, `projected_query`
/// `[B, A]` and `score` `[A, 1]`. Returns `(weights[B, N], context[B, C])`.
pub fn additive_attention(
    g: &mut Graph,
    projected_keys: Var,
    projected_query: Var,
    score: Var,
    values: Var,
    mask: Option<Var>,
) -> Result<(Var, Var), DiffError> {
    let (b, n) = (g.shape(projected_keys)[0], g.shape(projected_keys)[1]);
    let hidden = g.add_mid(projected_keys, projected_query)?;
    let hidden = g.tanh(hidden);
    let scores = g.matmul(hidden, score)?;
    let scores = g.reshape(scores, &[b, n])?;
    let scores = match mask {
        Some(m) => g.add(scores, m)?,
        None => scores,
    };
    let weights = g.softmax(scores, 1)?;
    let context = g.weighted_sum(weights, values)?;
    Ok((weights, context))
}
