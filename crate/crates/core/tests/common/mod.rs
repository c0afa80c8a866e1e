#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ripeloc_core::params::{Ctx, ParamId, ParamStore};
use ripeloc_core::Result;
use ripeloc_tensor::gradcheck::{self, GradReport, FD_EPS};
use ripeloc_tensor::{Mode, Tape, Tensor, Var};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Evaluates `f` on a fresh tape with the store's parameters as constants.
pub fn run<F>(store: &mut ParamStore, mode: Mode, x: &Tensor, f: F) -> Tensor
where
    F: FnOnce(&mut Ctx<'_>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let y = {
        let mut ctx = Ctx::new(&mut tape, store, mode, vec![]);
        f(&mut ctx, xv).unwrap()
    };
    tape.value(y).clone()
}

/// Finite-difference check of a block w.r.t. its input and the listed
/// parameters, with BatchNorm in training mode.
pub fn check_block<F>(store: &ParamStore, params: &[ParamId], x: &Tensor, f: F) -> GradReport
where
    F: Fn(&mut Ctx<'_>, Var) -> Result<Var>,
{
    let mut inputs = vec![x.clone()];
    inputs.extend(params.iter().map(|&id| store.get(id).clone()));
    gradcheck::check(&inputs, 120, FD_EPS, |tape, vars| {
        let mut s = store.clone();
        let mut ctx = Ctx::new(tape, &mut s, Mode::Train, vec![]);
        for (id, v) in params.iter().zip(&vars[1..]) {
            ctx.bind(*id, *v);
        }
        let y = f(&mut ctx, vars[0]).map_err(|e| match e {
            ripeloc_core::Error::Tensor(t) => t,
            other => panic!("{other}"),
        })?;
        gradcheck::project(ctx.tape, y)
    })
    .unwrap()
}

pub fn assert_grad(name: &str, r: GradReport) {
    assert!(
        r.max_rel_error < 1e-4,
        "{name}: rel err {:.3e} at input {} index {} (analytic {}, numeric {})",
        r.max_rel_error,
        r.input,
        r.index,
        r.analytic,
        r.numeric
    );
    assert!(r.checked > 0);
}

/// Sum of trainable scalars whose names start with `prefix`.
pub fn weights_under(store: &ParamStore, prefix: &str) -> usize {
    store
        .entries()
        .iter()
        .filter(|e| e.name.starts_with(prefix) && e.kind == ripeloc_core::params::ParamKind::Weight)
        .map(|e| e.tensor.numel())
        .sum()
}
