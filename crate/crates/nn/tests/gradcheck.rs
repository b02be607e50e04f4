//! Central-difference checks of every differentiable op.

use styleseg_nn::{
    AffineNorm, BatchNorm2d, Conv2d, Graph, Init, Linear, NormKind, PadMode, ParamId, ParamStore, Tensor, Var,
};

/// Compares analytic gradients of every trainable parameter against central
/// differences of the scalar produced by `f`.
fn check(ps: &mut ParamStore, f: &dyn Fn(&Graph, &ParamStore) -> Var, tol: f32) {
    let g = Graph::train(0);
    let loss = f(&g, ps);
    let grads = g.backward(loss);
    let eps = 2e-3f32;
    for idx in 0..ps.len() {
        if !ps.params()[idx].trainable {
            continue;
        }
        let id = ParamId(idx);
        let analytic = grads
            .get(ps.key(id))
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(ps.get(id).shape()));
        for i in 0..ps.get(id).len() {
            let orig = ps.get(id).data()[i];
            ps.get_mut(id).data_mut()[i] = orig + eps;
            let up = {
                let g = Graph::train(0);
                let l = f(&g, ps);
                g.value(l).item() as f64
            };
            ps.get_mut(id).data_mut()[i] = orig - eps;
            let down = {
                let g = Graph::train(0);
                let l = f(&g, ps);
                g.value(l).item() as f64
            };
            ps.get_mut(id).data_mut()[i] = orig;
            let numeric = ((up - down) / (2.0 * eps as f64)) as f32;
            let a = analytic.data()[i];
            let err = (a - numeric).abs() / (a.abs().max(numeric.abs()).max(1e-2));
            assert!(
                err < tol,
                "{}[{i}]: analytic {a}, numeric {numeric}",
                ps.params()[idx].name
            );
        }
    }
}

fn input(shape: &[usize], seed: u32) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|i| (((i as u32).wrapping_mul(2654435761).wrapping_add(seed) >> 8) as f32 / (1u32 << 24) as f32) * 2.0 - 1.0)
        .collect();
    Tensor::new(shape, data)
}

#[test]
fn smooth_conv_stack() {
    let mut ps = ParamStore::new(1);
    let c1 = Conv2d::new(&mut ps, "c1", 2, 3, 3, 1, 1, PadMode::Reflect, true);
    let c2 = Conv2d::new(&mut ps, "c2", 3, 2, 4, 2, 1, PadMode::Zero, true);
    let x = input(&[2, 2, 8, 8], 7);
    check(
        &mut ps,
        &|g, ps| {
            let xv = g.constant(x.clone());
            let h = c1.forward(g, ps, xv);
            let h = g.tanh(h);
            let h = c2.forward(g, ps, h);
            let h = g.sub(h, g.scale(h, 0.25));
            g.mse_const(h, 0.3)
        },
        1e-2,
    );
}

/// Piecewise-linear ops, checked on inputs whose entries are distinct and
/// bounded away from every kink by more than the difference step.
#[test]
fn kinked_ops_away_from_kinks() {
    let mut ps = ParamStore::new(1);
    let w = ps.add("x", &[1, 2, 4, 4], Init::Zeros);
    let vals: Vec<f32> = (0..32)
        .map(|i| {
            let k = (i * 13) % 32;
            let mag = 0.1 + 0.03 * k as f32;
            if k % 3 == 0 { -mag } else { mag }
        })
        .collect();
    *ps.get_mut(w) = Tensor::new(&[1, 2, 4, 4], vals);
    let target = input(&[1, 2, 4, 4], 21);
    check(
        &mut ps,
        &|g, ps| {
            let x = g.param(ps, w);
            let a = g.leaky_relu(x, 0.2);
            let r = g.relu(x);
            let p = g.max_pool2(x);
            let u = g.upsample2(p);
            let t = g.constant(target.clone());
            let s = g.add(g.add(a, r), u);
            let d = g.dropout(s, 0.0);
            g.add(g.mse_const(d, 0.1), g.l1(x, t))
        },
        1e-2,
    );
}

#[test]
fn normalization_layers() {
    let mut ps = ParamStore::new(2);
    let c = Conv2d::same3(&mut ps, "c", 1, 3, false);
    let bn = BatchNorm2d::new(&mut ps, "bn", 3);
    let inorm = AffineNorm::instance(&mut ps, "in", 3);
    let ln = AffineNorm::layer(&mut ps, "ln", 3);
    let x = input(&[3, 1, 6, 6], 3);
    let w = input(&[3, 3, 6, 6], 11);
    check(
        &mut ps,
        &|g, ps| {
            let xv = g.constant(x.clone());
            let wv = g.constant(w.clone());
            let h = c.forward(g, ps, xv);
            let a = bn.forward(g, ps, h);
            let b = inorm.forward(g, ps, h);
            let c2 = ln.forward(g, ps, h);
            let s = g.add(g.add(a, b), g.tanh(c2));
            let s = g.mul(s, wv);
            g.mean_all(s)
        },
        2e-2,
    );
}

#[test]
fn adain_mlp_and_heads() {
    let mut ps = ParamStore::new(3);
    let enc = Conv2d::new(&mut ps, "enc", 1, 4, 3, 1, 1, PadMode::Zero, true);
    let mlp = Linear::new(&mut ps, "mlp", 3, 8);
    let head = Conv2d::new(&mut ps, "head", 8, 4, 1, 1, 0, PadMode::Zero, true);
    let x = input(&[2, 1, 4, 4], 5);
    let style = input(&[2, 3], 9);
    let target = input(&[2, 4, 4, 4], 13);
    check(
        &mut ps,
        &|g, ps| {
            let xv = g.constant(x.clone());
            let s = g.constant(style.clone());
            let h = enc.forward(g, ps, xv);
            let hn = g.normalize(h, NormKind::Instance, 1e-5);
            let params = mlp.forward(g, ps, s);
            let gamma = g.narrow(params, 0, 4);
            let beta = g.narrow(params, 4, 4);
            let a = g.channel_affine(hn, gamma, beta);
            let cat = g.concat(&[a, h]);
            let logits = head.forward(g, ps, cat);
            let p = g.softmax_channels(logits);
            let t = g.constant(target.clone());
            let l1 = g.l1(p, t);
            let pooled = g.global_avg_pool(a);
            let flat = g.reshape(pooled, &[8]);
            let m = g.mean_all(g.scale(flat, 0.5));
            g.add(l1, m)
        },
        3e-2,
    );
}

#[test]
fn external_scalar_routes_supplied_gradient() {
    let mut ps = ParamStore::new(4);
    let w = ps.add("w", &[1, 1, 2, 2], Init::Normal { std: 1.0 });
    let g = Graph::train(0);
    let wv = g.param(&ps, w);
    let grad = Tensor::new(&[1, 1, 2, 2], vec![1.0, -2.0, 3.0, 0.5]);
    let l = g.external_scalar(wv, 7.0, grad.clone());
    let l = g.scale(l, 2.0);
    let grads = g.backward(l);
    let got = grads.get(ps.key(w)).unwrap();
    assert_eq!(got.data(), &[2.0, -4.0, 6.0, 1.0]);
}

#[test]
fn dropout_is_identity_in_eval_and_detach_blocks_gradient() {
    let mut ps = ParamStore::new(5);
    let w = ps.add("w", &[1, 1, 3, 3], Init::Normal { std: 1.0 });
    let g = Graph::eval();
    let wv = g.param(&ps, w);
    assert_eq!(g.dropout(wv, 0.5), wv);

    let g = Graph::train(1);
    let wv = g.param(&ps, w);
    let d = g.detach(wv);
    let l = g.add(g.mean_all(d), g.mean_all(g.scale(wv, 0.0)));
    let grads = g.backward(l);
    assert!(grads.get(ps.key(w)).unwrap().data().iter().all(|v| *v == 0.0));
}

#[test]
fn frozen_store_untouched_by_foreign_gradients() {
    let mut a = ParamStore::new(6);
    let wa = a.add("w", &[2, 2], Init::Normal { std: 1.0 });
    let mut b = ParamStore::new(6);
    let wb = b.add("w", &[2, 2], Init::Normal { std: 1.0 });
    let before = a.clone();
    let g = Graph::train(0);
    let x = g.param(&a, wa);
    let y = g.param(&b, wb);
    let l = g.mean_all(g.mul(x, y));
    let grads = g.backward(l);
    let mut opt = styleseg_nn::Adam::new(&b, Default::default());
    opt.step(&mut b, &grads);
    assert!(a.same_values(&before));
    assert!(!b.same_values(&before));
}
