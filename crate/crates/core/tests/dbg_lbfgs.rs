use hloba_core::autodiff::*;

// Expose the recursion indirectly: run lbfgs 2 iterations on a quadratic and
// compare its direction with a dense BFGS computation is hard from outside.
// Instead: count evaluations per iteration on Rosenbrock.
struct Probe(std::cell::RefCell<usize>);
impl Objective for Probe {
    fn value(&self, p: &[Tensor]) -> hloba_core::Result<f64> {
        let (x, y) = (p[0].data()[0], p[0].data()[1]);
        Ok((1.0 - x).powi(2) + 100.0 * (y - x * x).powi(2))
    }
    fn value_and_grad(&self, p: &[Tensor]) -> hloba_core::Result<(f64, Vec<Tensor>)> {
        *self.0.borrow_mut() += 1;
        let (x, y) = (p[0].data()[0], p[0].data()[1]);
        let v = (1.0 - x).powi(2) + 100.0 * (y - x * x).powi(2);
        let gx = -2.0 * (1.0 - x) - 400.0 * x * (y - x * x);
        let gy = 200.0 * (y - x * x);
        Ok((v, vec![Tensor::row(vec![gx, gy])]))
    }
}

#[test]
fn dbg_evals() {
    let obj = Probe(std::cell::RefCell::new(0));
    let out = lbfgs_minimize(&obj, &[Tensor::row(vec![-1.2, 1.0])], 1e-9, 40).unwrap();
    println!("iters={} evals={} grad={:.3e} loss={:.3e}", out.iterations, obj.0.borrow(), out.grad_norm, out.final_loss);
}
