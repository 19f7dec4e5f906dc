//! Environment-map files, the procedural sky dataset, and LDR image output.

mod dataset;
mod ldr;
pub mod rgbe;
pub mod sky;

pub use dataset::{list_maps, load_dataset_dir, save_dataset_dir};
pub use ldr::{encode_png, horizontal_panel, write_png};
pub use rgbe::{read_rgbe, write_rgbe, RgbeError};
pub use sky::{generate_sky, render_skies, sample_skies, with_near_duplicates, SkyParams};
