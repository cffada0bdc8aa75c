//! Adversarial patch objectives and optimizers against the toy model.

pub mod craft;
pub mod losses;

pub use craft::{craft_defense_aware, craft_patch, AttackConfig, AttackMode, CraftedPatch, Provenance, Term};
pub use losses::{
    combine_gradients, default_palette, loss_nps, loss_oz, loss_oz_var, loss_smooth, loss_task_untargeted,
    loss_task_untargeted_var,
};
