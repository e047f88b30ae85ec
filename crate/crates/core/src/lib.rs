pub mod attention;
pub mod autoencoder;
pub mod bbox;
pub mod data;
pub mod detector;
pub mod error;
pub mod eval;
pub mod gradsuite;
pub mod tensor;
pub mod translator;

pub use bbox::{iou, BBox};
pub use error::{Error, Result};
