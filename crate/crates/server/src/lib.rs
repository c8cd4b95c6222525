//! Network side of area angle monitoring: the phasor stream server and
//! receiver, the live monitor pipeline and the HTTP/WebSocket API.

pub mod api;
pub mod pipeline;
pub mod stream;
pub mod whatif;
