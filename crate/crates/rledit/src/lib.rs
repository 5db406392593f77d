//! Lifelong model editing on a tiny autoregressive language model.
//!
//! An editor hypernetwork maps per-token rank-1 gradient factors of the LM's
//! editable layers to parameter updates. The hypernetwork is trained with a
//! trajectory-level objective: roll out a whole sequence of edits, score each
//! step with an edit/locality/backtracking reward, and backpropagate the
//! discounted return through the chained weight updates. Editing itself is
//! training-free: collect gradients, transform, add.
//!
//! Module map:
//! - [`autodiff`]: dense-tensor reverse-mode AD (the substrate for everything)
//! - [`model`]: the editable toy transformer LM
//! - [`hypernet`]: gradient-factor -> update hypernetwork
//! - [`reward`]: per-step reward components and the trajectory return
//! - [`trainer`]: trajectory rollouts and hypernetwork training, plus ablations
//! - [`editor`]: training-free sequential editing and the three metrics
//! - [`data`]: synthetic fact corpus generator and record files
//! - [`variants`]: named training / editing strategies behind common traits
//! - [`config`]: presets, key=value config files, run manifests

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod editor;
pub mod error;
pub mod gradcheck;
pub mod hypernet;
pub mod logfmt;
pub mod model;
pub mod optim;
pub mod reward;
pub mod trainer;
pub mod variants;

pub use error::{Error, Result};
