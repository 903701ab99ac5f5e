use super::{ParamStore, Tensor, TensorError};

/// Per-parameter squared-gradient accumulators.
#[derive(Debug, Clone, PartialEq)]
pub struct AdagradState {
    pub accumulators: Vec<Tensor>,
    pub learning_rate: f64,
    pub epsilon: f64,
}

impl AdagradState {
    pub fn new(store: &ParamStore, learning_rate: f64, epsilon: f64) -> Self {
        AdagradState {
            accumulators: store.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect(),
            learning_rate,
            epsilon,
        }
    }
}

/// Adagrad: `acc += g^2; p -= lr * g / (sqrt(acc) + eps)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Adagrad {
    pub state: AdagradState,
}

impl Adagrad {
    pub const DEFAULT_LR: f64 = 0.01;
    pub const DEFAULT_EPSILON: f64 = 1e-10;

    pub fn new(store: &ParamStore, learning_rate: f64) -> Self {
        Adagrad {
            state: AdagradState::new(store, learning_rate, Self::DEFAULT_EPSILON),
        }
    }

    /// Applies one update; `grads` must follow the store's parameter order.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor]) -> Result<(), TensorError> {
        adagrad_step(store, grads, &mut self.state)
    }
}

pub fn adagrad_step(
    store: &mut ParamStore,
    grads: &[Tensor],
    state: &mut AdagradState,
) -> Result<(), TensorError> {
    if grads.len() != store.len() || state.accumulators.len() != store.len() {
        return Err(TensorError::Shape {
            node: 0,
            op: "adagrad",
            detail: format!(
                "{} parameters, {} gradients, {} accumulators",
                store.len(),
                grads.len(),
                state.accumulators.len()
            ),
        });
    }
    let ids: Vec<_> = store.ids().collect();
    for (i, id) in ids.into_iter().enumerate() {
        let param = store.get_mut(id);
        let (g, acc) = (&grads[i], &mut state.accumulators[i]);
        if g.shape() != param.shape() || acc.shape() != param.shape() {
            return Err(TensorError::Shape {
                node: i,
                op: "adagrad",
                detail: format!(
                    "param {:?}, grad {:?}, accumulator {:?}",
                    param.shape(),
                    g.shape(),
                    acc.shape()
                ),
            });
        }
        let lr = state.learning_rate;
        let eps = state.epsilon;
        for ((p, a), &gv) in param
            .data_mut()
            .iter_mut()
            .zip(acc.data_mut().iter_mut())
            .zip(g.data())
        {
            if gv == 0.0 {
                continue;
            }
            *a += gv * gv;
            *p -= lr * gv / (a.sqrt() + eps);
        }
    }
    Ok(())
}
