use std::collections::{HashMap, HashSet};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::Tensor;

/// Topologically ordered record of the operations leading to a tensor.
///
/// Every node appears after all of its inputs and exactly once. Only nodes
/// that require gradients are recorded.
pub struct Tape<T: Scalar> {
    nodes: Vec<Tensor<T>>,
}

impl<T: Scalar> Tape<T> {
    /// Linearizes the graph reachable from `root`.
    pub fn record(root: &Tensor<T>) -> Self {
        let mut nodes = Vec::new();
        if !root.requires_grad() {
            return Self { nodes };
        }
        let mut visited: HashSet<u64> = HashSet::new();
        // (node, inputs already expanded)
        let mut stack: Vec<(Tensor<T>, bool)> = vec![(root.clone(), false)];
        while let Some((node, expanded)) = stack.pop() {
            if expanded {
                nodes.push(node);
                continue;
            }
            if !visited.insert(node.id()) {
                continue;
            }
            stack.push((node.clone(), true));
            if let Some(gf) = node.grad_fn() {
                for input in gf.inputs.iter().rev() {
                    if input.requires_grad() && !visited.contains(&input.id()) {
                        stack.push((input.clone(), false));
                    }
                }
            }
        }
        Self { nodes }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[Tensor<T>] {
        &self.nodes
    }

    /// Names of the recorded operations in forward order ("leaf" for inputs).
    pub fn op_names(&self) -> Vec<&'static str> {
        self.nodes
            .iter()
            .map(|n| n.grad_fn().map(|g| g.name).unwrap_or("leaf"))
            .collect()
    }

    /// Replays the tape in reverse, seeding `root` with gradient one.
    pub(crate) fn run(&self, root: &Tensor<T>) -> Result<()> {
        if root.numel() != 1 {
            return Err(Error::contract("backward requires a scalar loss"));
        }
        let mut grads: HashMap<u64, Vec<T>> = HashMap::new();
        grads.insert(root.id(), vec![T::one()]);
        for node in self.nodes.iter().rev() {
            let Some(g) = grads.remove(&node.id()) else {
                continue;
            };
            match node.grad_fn() {
                None => node.accumulate_grad(&g),
                Some(gf) => {
                    let input_grads = (gf.backward)(&g, node.data(), &gf.inputs);
                    debug_assert_eq!(input_grads.len(), gf.inputs.len(), "{}", gf.name);
                    for (input, ig) in gf.inputs.iter().zip(input_grads) {
                        let Some(ig) = ig else { continue };
                        if !input.requires_grad() {
                            continue;
                        }
                        debug_assert_eq!(ig.len(), input.numel(), "{}", gf.name);
                        match grads.get_mut(&input.id()) {
                            Some(acc) => acc.iter_mut().zip(&ig).for_each(|(a, &b)| *a += b),
                            None => {
                                grads.insert(input.id(), ig);
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }
}
