use crate::Result;

use super::{NodeId, Tape, Tensor};

/// Compare analytic gradients against central finite differences.
///
/// `build` reconstructs the graph from leaves to a scalar loss; it runs once
/// for the analytic pass and twice per perturbed entry. Every tape is seeded
/// identically so dropout masks are the same in all evaluations. Returns the
/// worst relative error over all entries of all `requires_grad` inputs,
/// where the relative error uses a unit floor in the denominator.
pub fn grad_check<F>(inputs: &[Tensor], epsilon: f64, seed: u64, build: F) -> Result<f64>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    assert!(
        epsilon > 0.0 && epsilon <= 1e-2,
        "epsilon must be in (0, 1e-2]"
    );

    let eval = |tensors: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::with_seed(seed, true);
        let ids: Vec<NodeId> = tensors.iter().map(|t| tape.leaf(t)).collect();
        let loss = build(&mut tape, &ids)?;
        Ok(tape.value(loss)[0])
    };

    // analytic pass
    let mut tape = Tape::with_seed(seed, true);
    let ids: Vec<NodeId> = inputs.iter().map(|t| tape.leaf(t)).collect();
    let loss = build(&mut tape, &ids)?;
    tape.backward(loss)?;

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        if !input.grad_required() {
            continue;
        }
        let analytic: Vec<f64> = match tape.grad(ids[i]) {
            Some(g) => g.to_vec(),
            None => vec![0.0; input.numel()],
        };
        for j in 0..input.numel() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + epsilon;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = orig - epsilon;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * epsilon);
            let denom = analytic[j].abs().max(numeric.abs()).max(1.0);
            worst = worst.max((analytic[j] - numeric).abs() / denom);
        }
    }
    Ok(worst)
}
