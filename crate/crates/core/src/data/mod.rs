//! Synthetic textured-shapes world, PNG and label-map IO, and unpaired
//! batch sampling.

mod io;
mod sampler;
mod world;

pub use io::{
    colorize_labels, format_key_values, from_u8, get_parsed, load_dataset, parse_key_values, read_image_png,
    read_label_png, read_world_config, to_u8, world_config_text, write_dataset, write_grid_png, write_image_png,
    write_label_png, Dataset, WORLD_FILE,
};
pub use sampler::UnpairedSampler;
pub use world::{
    generate_range, generate_world, nearest_color_labels, one_hot, one_hot_batch, ClassAppearance, LabelMap,
    ShapeKind, ShapesWorldSpec, MAX_CLASSES,
};
