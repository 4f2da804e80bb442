//! Parameterized layers: thin handles into a [`ParamStore`].

use rand::Rng;

use super::params::{ParamId, ParamKind, ParamStore};
use super::tape::{Mode, Tape, Var};
use crate::binarize::sign_binarize;
use crate::error::Result;
use crate::tensor::Tensor;

/// Kaiming-uniform initialization: `U(-b, b)` with `b = sqrt(6 / fan_in)`.
pub fn kaiming_uniform<R: Rng>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    let bound = (6.0 / fan_in as f32).sqrt();
    Tensor::from_fn(shape, |_| rng.gen_range(-bound..bound))
}

#[derive(Clone, Copy, Debug)]
pub struct Dense {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub inputs: usize,
    pub outputs: usize,
}

impl Dense {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        inputs: usize,
        outputs: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let w = store.add(
            format!("{name}.weight"),
            kaiming_uniform(&[outputs, inputs], inputs, rng),
            ParamKind::Weight,
        );
        let b = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[outputs]), ParamKind::Weight));
        Dense {
            w,
            b,
            inputs,
            outputs,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.w);
        let b = self.b.map(|b| tape.param(store, b));
        tape.dense(x, w, b)
    }

    /// Forward with sign-binarized weights (straight-through to the latent weights).
    pub fn forward_binary(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.w);
        let wb = tape.sign_ste(w);
        let b = self.b.map(|b| tape.param(store, b));
        tape.dense(x, wb, b)
    }

    pub fn binarized_weight(&self, store: &ParamStore) -> Tensor {
        sign_binarize(store.value(self.w))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Conv2d {
    pub k: ParamId,
    pub b: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let fan_in = cin * kernel * kernel;
        let k = store.add(
            format!("{name}.weight"),
            kaiming_uniform(&[cout, cin, kernel, kernel], fan_in, rng),
            ParamKind::Weight,
        );
        let b = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[cout]), ParamKind::Weight));
        Conv2d { k, b, stride, pad }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let k = tape.param(store, self.k);
        let b = self.b.map(|b| tape.param(store, b));
        tape.conv2d(x, k, b, self.stride, self.pad)
    }

    pub fn forward_binary(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let k = tape.param(store, self.k);
        let kb = tape.sign_ste(k);
        let b = self.b.map(|b| tape.param(store, b));
        tape.conv2d(x, kb, b, self.stride, self.pad)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f32,
    pub eps: f32,
}

impl BatchNorm {
    pub const DEFAULT_EPS: f32 = 1e-5;
    pub const DEFAULT_MOMENTUM: f32 = 0.1;

    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        BatchNorm {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[channels], 1.0), ParamKind::Weight),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[channels]), ParamKind::Weight),
            running_mean: store.add(format!("{name}.running_mean"), Tensor::zeros(&[channels]), ParamKind::Buffer),
            running_var: store.add(format!("{name}.running_var"), Tensor::full(&[channels], 1.0), ParamKind::Buffer),
            momentum: Self::DEFAULT_MOMENTUM,
            eps: Self::DEFAULT_EPS,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        // Frozen layers keep their running statistics.
        let frozen = store.get(self.gamma).frozen;
        let ids = (tape.mode() == Mode::Train && !frozen).then_some((self.running_mean, self.running_var));
        tape.batchnorm(
            x,
            g,
            b,
            (store.value(self.running_mean), store.value(self.running_var)),
            ids,
            self.momentum,
            self.eps,
        )
    }
}

/// Folds pending batch statistics into the running averages.
pub fn apply_running_updates(store: &mut ParamStore, updates: Vec<super::tape::RunningUpdate>) {
    for u in updates {
        let mom = u.momentum;
        for (r, b) in store.value_mut(u.mean_id).data_mut().iter_mut().zip(&u.batch_mean) {
            *r = (1.0 - mom) * *r + mom * b;
        }
        for (r, b) in store
            .value_mut(u.var_id)
            .data_mut()
            .iter_mut()
            .zip(&u.batch_var_unbiased)
        {
            *r = (1.0 - mom) * *r + mom * b;
        }
    }
}
