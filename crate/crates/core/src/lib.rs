pub mod bench;
pub mod error;
pub mod gnm;
pub mod interconnect;
pub mod mcomponent;
pub mod ncomponent;
pub mod net;
pub mod pcomponent;
pub mod rack;
pub mod sched;
pub mod time;
pub mod topology;
pub mod wire;

pub use error::{Error, Result};
