//! Parameterized building blocks of the route model.

use rand::Rng;

use super::{Graph, NodeId, NumericsError, ParameterStore};

/// Uniform initialisation bound for a layer of width `d_h`.
pub fn init_bound(d_h: usize) -> f64 {
    1.0 / (d_h as f64).sqrt()
}

/// Registers a dense layer `x W + b` under `prefix`.
pub fn init_linear<R: Rng>(
    store: &mut ParameterStore,
    prefix: &str,
    d_in: usize,
    d_out: usize,
    bound: f64,
    rng: &mut R,
) {
    store.uniform(format!("{prefix}.w"), vec![d_in, d_out], bound, rng);
    store.zeros(format!("{prefix}.b"), vec![d_out]);
}

pub fn linear(g: &mut Graph<'_>, prefix: &str, x: NodeId) -> Result<NodeId, NumericsError> {
    let w = g.param(&format!("{prefix}.w"))?;
    let b = g.param(&format!("{prefix}.b"))?;
    let xw = g.matmul(x, w)?;
    g.add_row(xw, b)
}

fn block_prefix(index: usize) -> String {
    format!("enc.block{index}")
}

/// Registers the weights of encoder block `index`: attention projections,
/// two normalizations and a `d_h -> 4 d_h -> d_h` feed-forward net.
pub fn init_mha_ffn_block<R: Rng>(store: &mut ParameterStore, index: usize, d_h: usize, rng: &mut R) {
    let p = block_prefix(index);
    let bound = init_bound(d_h);
    for name in ["wq", "wk", "wv", "wo"] {
        store.uniform(format!("{p}.{name}"), vec![d_h, d_h], bound, rng);
    }
    store.constant(format!("{p}.bn1.gamma"), vec![d_h], 1.0);
    store.zeros(format!("{p}.bn1.beta"), vec![d_h]);
    init_linear(store, &format!("{p}.ffn1"), d_h, 4 * d_h, bound, rng);
    init_linear(store, &format!("{p}.ffn2"), 4 * d_h, d_h, init_bound(4 * d_h), rng);
    store.constant(format!("{p}.bn2.gamma"), vec![d_h], 1.0);
    store.zeros(format!("{p}.bn2.beta"), vec![d_h]);
}

/// Multi-head self-attention over the rows of `x` (`n x d_h`).
pub fn multi_head_attention(
    g: &mut Graph<'_>,
    prefix: &str,
    x: NodeId,
    n_head: usize,
) -> Result<NodeId, NumericsError> {
    let d_h = g.shape(x).1;
    if n_head == 0 || d_h % n_head != 0 {
        return Err(NumericsError::HeadSplit { d_h, n_head });
    }
    let dk = d_h / n_head;
    let wq = g.param(&format!("{prefix}.wq"))?;
    let wk = g.param(&format!("{prefix}.wk"))?;
    let wv = g.param(&format!("{prefix}.wv"))?;
    let wo = g.param(&format!("{prefix}.wo"))?;
    let q = g.matmul(x, wq)?;
    let k = g.matmul(x, wk)?;
    let v = g.matmul(x, wv)?;
    let scale = 1.0 / (dk as f64).sqrt();
    let mut heads = Vec::with_capacity(n_head);
    for h in 0..n_head {
        let qh = g.slice_cols(q, h * dk, dk)?;
        let kh = g.slice_cols(k, h * dk, dk)?;
        let vh = g.slice_cols(v, h * dk, dk)?;
        let kt = g.transpose(kh);
        let scores = g.matmul(qh, kt)?;
        let scores = g.scale(scores, scale);
        let attn = g.softmax_rows(scores);
        heads.push(g.matmul(attn, vh)?);
    }
    let cat = g.concat_cols(&heads)?;
    g.matmul(cat, wo)
}

/// One encoder block: `h = BN(x + MHA(x))`, `out = BN(h + FFN(h))`, with
/// normalization statistics taken over the rows of `x`.
pub fn mha_ffn_block(
    g: &mut Graph<'_>,
    x: NodeId,
    index: usize,
    n_head: usize,
) -> Result<NodeId, NumericsError> {
    let p = block_prefix(index);
    let attn = multi_head_attention(g, &p, x, n_head)?;
    let res1 = g.add(x, attn)?;
    let g1 = g.param(&format!("{p}.bn1.gamma"))?;
    let b1 = g.param(&format!("{p}.bn1.beta"))?;
    let h = g.batch_norm(res1, g1, b1)?;
    let f = linear(g, &format!("{p}.ffn1"), h)?;
    let f = g.relu(f);
    let f = linear(g, &format!("{p}.ffn2"), f)?;
    let res2 = g.add(h, f)?;
    let g2 = g.param(&format!("{p}.bn2.gamma"))?;
    let b2 = g.param(&format!("{p}.bn2.beta"))?;
    g.batch_norm(res2, g2, b2)
}

/// Registers an LSTM cell under `prefix`. The forget-gate bias starts at 1.
pub fn init_recurrent<R: Rng>(store: &mut ParameterStore, prefix: &str, d_h: usize, rng: &mut R) {
    let bound = init_bound(d_h);
    store.uniform(format!("{prefix}.wx"), vec![d_h, 4 * d_h], bound, rng);
    store.uniform(format!("{prefix}.wh"), vec![d_h, 4 * d_h], bound, rng);
    let mut bias = vec![0.0; 4 * d_h];
    bias[d_h..2 * d_h].iter_mut().for_each(|b| *b = 1.0);
    store.insert(format!("{prefix}.b"), vec![4 * d_h], bias);
}

/// LSTM update for one `1 x d_h` input. Gate order: input, forget,
/// candidate, output. Returns `(h, c)`; the output equals `h`.
pub fn recurrent_step(
    g: &mut Graph<'_>,
    prefix: &str,
    input: NodeId,
    state: (NodeId, NodeId),
) -> Result<(NodeId, NodeId), NumericsError> {
    let (h, c) = state;
    let d_h = g.shape(h).1;
    let wx = g.param(&format!("{prefix}.wx"))?;
    let wh = g.param(&format!("{prefix}.wh"))?;
    let b = g.param(&format!("{prefix}.b"))?;
    if g.shape(input) != (1, d_h) || g.shape(c) != (1, d_h) {
        return Err(NumericsError::ShapeMismatch {
            op: "recurrent_step",
            left: g.shape(input),
            right: g.shape(c),
        });
    }
    let xs = g.matmul(input, wx)?;
    let hs = g.matmul(h, wh)?;
    let z = g.add(xs, hs)?;
    let z = g.add_row(z, b)?;
    let zi = g.slice_cols(z, 0, d_h)?;
    let zf = g.slice_cols(z, d_h, d_h)?;
    let zg = g.slice_cols(z, 2 * d_h, d_h)?;
    let zo = g.slice_cols(z, 3 * d_h, d_h)?;
    let i = g.sigmoid(zi);
    let f = g.sigmoid(zf);
    let cand = g.tanh(zg);
    let o = g.sigmoid(zo);
    let keep = g.mul(f, c)?;
    let write = g.mul(i, cand)?;
    let c_new = g.add(keep, write)?;
    let tc = g.tanh(c_new);
    let h_new = g.mul(o, tc)?;
    Ok((h_new, c_new))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_check, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_input(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
        Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    #[test]
    fn zero_block_gives_zero_output() {
        let mut store = ParameterStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        init_mha_ffn_block(&mut store, 0, 8, &mut rng);
        for (_, p) in store.iter_mut() {
            if p.shape.len() == 2 {
                p.value.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let mut g = Graph::new(&store);
        let x = g.input(Tensor::zeros(3, 8));
        let y = mha_ffn_block(&mut g, x, 0, 4).unwrap();
        assert!(g.value(y).data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_row_attention_is_self_focused() {
        let mut store = ParameterStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        init_mha_ffn_block(&mut store, 0, 8, &mut rng);
        let mut g = Graph::new(&store);
        let x = g.input(random_input(&mut rng, 1, 8));
        let wv = g.param("enc.block0.wv").unwrap();
        let wo = g.param("enc.block0.wo").unwrap();
        let attn = multi_head_attention(&mut g, "enc.block0", x, 4).unwrap();
        // With one row the attention weight is 1, so MHA(x) = x Wv Wo.
        let xv = g.matmul(x, wv).unwrap();
        let expect = g.matmul(xv, wo).unwrap();
        for (a, b) in g.value(attn).data.iter().zip(&g.value(expect).data) {
            assert!((a - b).abs() < 1e-14);
        }
        assert!(mha_ffn_block(&mut g, x, 0, 4).is_ok());
    }

    #[test]
    fn head_split_and_shape_errors() {
        let mut store = ParameterStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        init_mha_ffn_block(&mut store, 0, 6, &mut rng);
        let mut g = Graph::new(&store);
        let x = g.input(Tensor::zeros(2, 6));
        assert!(matches!(
            mha_ffn_block(&mut g, x, 0, 4),
            Err(NumericsError::HeadSplit { d_h: 6, n_head: 4 })
        ));
        let bad = g.input(Tensor::zeros(2, 5));
        assert!(mha_ffn_block(&mut g, bad, 0, 1).is_err());
    }

    #[test]
    fn block_gradients_match_finite_differences() {
        let mut store = ParameterStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        init_mha_ffn_block(&mut store, 0, 8, &mut rng);
        let x = random_input(&mut rng, 4, 8);
        let w = random_input(&mut rng, 4, 8);
        let report = finite_diff_check(
            |g: &mut Graph<'_>| {
                let xi = g.input(x.clone());
                let y = mha_ffn_block(g, xi, 0, 4)?;
                g.dot_const(y, w.data.clone())
            },
            &store,
            1e-5,
            1e-4,
            200,
            7,
        )
        .unwrap();
        assert!(report.passed, "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn recurrent_zero_state() {
        let mut store = ParameterStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        init_recurrent(&mut store, "dec.lstm", 4, &mut rng);
        for (_, p) in store.iter_mut() {
            p.value.iter_mut().for_each(|v| *v = 0.0);
        }
        let mut g = Graph::new(&store);
        let z = g.input(Tensor::zeros(1, 4));
        let (h, c) = recurrent_step(&mut g, "dec.lstm", z, (z, z)).unwrap();
        assert!(g.value(h).data.iter().all(|&v| v == 0.0));
        assert!(g.value(c).data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn recurrent_is_deterministic_and_checked() {
        let mut store = ParameterStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        init_recurrent(&mut store, "dec.lstm", 6, &mut rng);
        let x = random_input(&mut rng, 1, 6);
        let h0 = random_input(&mut rng, 1, 6);
        let c0 = random_input(&mut rng, 1, 6);
        let run = || {
            let mut g = Graph::new(&store);
            let xi = g.input(x.clone());
            let mut state = (g.input(h0.clone()), g.input(c0.clone()));
            for _ in 0..3 {
                state = recurrent_step(&mut g, "dec.lstm", xi, state).unwrap();
            }
            g.value(state.0).clone()
        };
        assert_eq!(run(), run());

        let w = random_input(&mut rng, 1, 6);
        let report = finite_diff_check(
            |g: &mut Graph<'_>| {
                let xi = g.input(x.clone());
                let mut state = (g.input(h0.clone()), g.input(c0.clone()));
                for _ in 0..3 {
                    state = recurrent_step(g, "dec.lstm", xi, state)?;
                }
                let both = g.add(state.0, state.1)?;
                g.dot_const(both, w.data.clone())
            },
            &store,
            1e-5,
            1e-4,
            100,
            11,
        )
        .unwrap();
        assert!(report.passed, "max rel err {}", report.max_rel_err);

        let mut g = Graph::new(&store);
        let bad = g.input(Tensor::zeros(1, 5));
        let h = g.input(h0.clone());
        assert!(recurrent_step(&mut g, "dec.lstm", bad, (h, h)).is_err());
    }
}
