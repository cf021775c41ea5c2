use mrp_core::encoder::{encode_image, EncoderWeights, ModelDims};

const DIMS: ModelDims = ModelDims {
    d_x: 4,
    d_c: 2,
    d_p: 2,
    d_e: 3,
};

const GOLDEN: [f64; 3] = [0.40064005150029325, 0.3961031127778234, 0.049569710344333474];

fn matvec_oracle(w: &EncoderWeights, x: &[f64], prompt: &[f64]) -> Vec<f64> {
    let (m, b) = w.image_weights();
    let input: Vec<f64> = prompt.iter().chain(x).copied().collect();
    (0..m.rows())
        .map(|r| {
            let mut acc = b[r];
            for (c, v) in input.iter().enumerate() {
                acc += m.get(r, c) * v;
            }
            acc.tanh()
        })
        .collect()
}

#[test]
fn seeded_image_embedding_is_pinned() {
    let w = EncoderWeights::random(1, DIMS);
    let x = [1.0, 0.0, 0.0, 0.0];
    let z = encode_image(&x, &[0.0, 0.0], &w).unwrap();
    for (k, (a, g)) in z.iter().zip(GOLDEN).enumerate() {
        assert!((a - g).abs() <= 1e-15, "coord {k}: {a} vs {g}");
    }
    let oracle = matvec_oracle(&w, &x, &[0.0, 0.0]);
    assert!(z.iter().zip(&oracle).all(|(a, b)| (a - b).abs() <= 1e-15));
}

#[test]
fn oracle_agrees_with_prompted_inputs() {
    let w = EncoderWeights::random(1, DIMS);
    let x = [0.3, -1.2, 0.8, 2.0];
    let prompt = [0.5, -0.25];
    let z = encode_image(&x, &prompt, &w).unwrap();
    let oracle = matvec_oracle(&w, &x, &prompt);
    assert!(z.iter().zip(&oracle).all(|(a, b)| (a - b).abs() <= 1e-15));
}
