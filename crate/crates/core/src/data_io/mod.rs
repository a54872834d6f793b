//! Frame ingestion, synthetic scenes with analytic flow, `.flo` I/O and
//! flow visualization.

mod dataset;
mod flow;
mod frames;
mod synthetic;

pub use dataset::{
    load_sequence_dir, make_dataset, write_sequence_dir, DatasetManifest, DatasetPlan, EntrySource, LoadedSequence,
    ManifestEntry, Normalization, Split, MANIFEST_FILE, MANIFEST_VERSION,
};
pub use flow::{
    decode_flo, encode_flo, flow_hue_degrees, flow_to_color, read_flo, rgb_hue_degrees, write_flo, FlowField, FLO_MAGIC,
};
pub use frames::{
    denormalize_frame, denormalize_value, list_frame_files, load_frame, load_frame_folder, normalize_frame,
    normalize_value, save_frame, Denormalized, FrameSequence, SPATIAL_MULTIPLE,
};
pub use synthetic::{generate_moving_shapes, SceneSampler, ShapeKind, ShapeSpec, SyntheticSceneSpec, DIRECTIONS};
