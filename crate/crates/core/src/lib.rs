//! Semantic-mask-guided style transfer for eye images: a fixed loss network,
//! masked content/style losses, a feed-forward transform network, projected
//! L-BFGS and Adam optimizers, and evaluation utilities.

pub mod error;
pub mod fsutil;
pub mod image_io;
pub mod loss;
pub mod lossnet;
pub mod masks;
pub mod metrics;
pub mod model_io;
pub mod optim;
pub mod synth;
pub mod transform;

pub use error::{Error, Result};
pub use image_io::{decode_image, read_image, resize_bilinear, write_image, Image};
