//! Pursuit gridworld.

mod pursuit;

pub use pursuit::{
    capture_events, frame_line, global_state_vector, Action, EnvError, EnvState, PursuitConfig,
    PursuitEnv, Pos, StepOutcome, GLOBAL_STATE_DIM, N_ACTIONS, POOL,
};
