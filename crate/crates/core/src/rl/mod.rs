//! TD3 core: replay, targets, updates and the training loop.

pub mod agent;
pub mod buffer;
pub mod td3;
pub mod train;

pub use agent::{critic_regression, Agent, AgentAction, Mode};
pub use buffer::{buffer_sample, Batch, ReplayBuffer, Transition};
pub use td3::{bellman_target, epsilon_at, soft_update, Td3Config};
pub use train::{train_loop, EpisodeRow, EvalRow, Schedule, TrainRecord};
