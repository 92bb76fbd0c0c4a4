//! Episode rollout helper shared by the trainer and the evaluation paths.

use ndarray::Array1;

use crate::envs::{Env, TaskInstance, Transition};
use crate::error::Result;
use crate::numerics::Prng;
use crate::sac::{ActMode, Actor};

/// Runs one full episode of `task` under the actor conditioned on a fixed
/// embedding. Every transition is handed to `on_transition`; the episode
/// return is the undiscounted reward sum.
pub fn run_episode(
    task: &TaskInstance,
    actor: &Actor,
    embedding: &Array1<f64>,
    mode: ActMode,
    rng: &mut Prng,
    mut on_transition: impl FnMut(Transition),
) -> Result<f64> {
    let mut env = Env::new(task.clone());
    let mut state = env.reset(rng);
    let mut total = 0.0;
    loop {
        let action = actor.act(&state, embedding, mode, rng)?;
        let (next, reward, done) = env.step(&action)?;
        total += reward;
        on_transition(Transition {
            state: state.clone(),
            action,
            next_state: next.clone(),
            reward,
        });
        state = next;
        if done {
            break;
        }
    }
    Ok(total)
}
