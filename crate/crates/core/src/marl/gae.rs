use super::MarlError;

/// Generalized advantage estimation over one or more concatenated episodes.
///
/// `next_values[t]` is the bootstrap for step `t` (already zero when the step
/// terminated the task); `boundaries[t]` cuts the recursion after step `t`.
/// Returns `(advantages, returns)` with `returns = advantages + values`.
pub fn compute_gae_bootstrapped(
    rewards: &[f64],
    values: &[f64],
    next_values: &[f64],
    boundaries: &[bool],
    gamma: f64,
    lambda: f64,
) -> Result<(Vec<f64>, Vec<f64>), MarlError> {
    let n = rewards.len();
    if values.len() != n || next_values.len() != n || boundaries.len() != n {
        return Err(MarlError::Length(format!(
            "rewards {n}, values {}, next_values {}, boundaries {}",
            values.len(),
            next_values.len(),
            boundaries.len()
        )));
    }
    let mut adv = vec![0.0; n];
    let mut carry = 0.0;
    for t in (0..n).rev() {
        if boundaries[t] {
            carry = 0.0;
        }
        let delta = rewards[t] + gamma * next_values[t] - values[t];
        carry = delta + gamma * lambda * carry;
        adv[t] = carry;
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((adv, returns))
}

/// GAE for a single trajectory where `dones[t]` marks termination after
/// step `t`; the value after a terminal step, or after the last step, is 0.
pub fn compute_gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    gamma: f64,
    lambda: f64,
) -> Result<(Vec<f64>, Vec<f64>), MarlError> {
    let n = rewards.len();
    if values.len() != n || dones.len() != n {
        return Err(MarlError::Length(format!(
            "rewards {n}, values {}, dones {}",
            values.len(),
            dones.len()
        )));
    }
    let next: Vec<f64> = (0..n)
        .map(|t| if dones[t] || t + 1 == n { 0.0 } else { values[t + 1] })
        .collect();
    let boundaries: Vec<bool> = (0..n).map(|t| dones[t] || t + 1 == n).collect();
    compute_gae_bootstrapped(rewards, values, &next, &boundaries, gamma, lambda)
}

/// Zero-mean, unit-variance rescaling (population std, guarded by 1e-8).
pub fn normalize(xs: &mut [f64]) {
    if xs.is_empty() {
        return;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt() + 1e-8;
    xs.iter_mut().for_each(|x| *x = (*x - mean) / std);
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn two_step_terminal_episode() {
        let (a, r) = compute_gae(&[1.0, 0.0], &[0.0, 0.0], &[false, true], 1.0, 1.0).unwrap();
        assert_eq!(a, vec![1.0, 0.0]);
        assert_eq!(r, vec![1.0, 0.0]);
    }

    #[test]
    fn zero_rewards_zero_advantage() {
        let (a, _) = compute_gae(&[0.0; 5], &[0.0; 5], &[false; 5], 0.99, 0.95).unwrap();
        assert!(a.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn lambda_zero_is_td_error() {
        let r = [0.5, -1.0, 2.0, 0.3];
        let v = [0.1, 0.2, -0.4, 1.0];
        let d = [false, false, true, false];
        let (a, _) = compute_gae(&r, &v, &d, 0.9, 0.0).unwrap();
        let td = [0.5 + 0.9 * 0.2 - 0.1, -1.0 + 0.9 * -0.4 - 0.2, 2.0 - -0.4, 0.3 - 1.0];
        for (x, y) in a.iter().zip(td) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn length_mismatch() {
        assert!(matches!(compute_gae(&[1.0], &[0.0, 0.0], &[true], 1.0, 1.0), Err(MarlError::Length(_))));
    }

    proptest! {
        #[test]
        fn unit_discount_recovers_reward_to_go(rewards in prop::collection::vec(-5.0f64..5.0, 1..40)) {
            let n = rewards.len();
            let mut dones = vec![false; n];
            dones[n - 1] = true;
            let (adv, _) = compute_gae(&rewards, &vec![0.0; n], &dones, 1.0, 1.0).unwrap();
            for t in 0..n {
                let togo: f64 = rewards[t..].iter().sum();
                prop_assert!((adv[t] - togo).abs() < 1e-9);
            }
        }
    }
}
