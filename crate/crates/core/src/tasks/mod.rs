//! Data sources, N-way K-shot episodes and continual-learning sequences.

pub mod dataset;
pub mod episode;
pub mod idx;
pub mod imagedir;
pub mod sequence;
pub mod split;
pub mod synth;

pub use dataset::{Dataset, FeatureStats, Normalization};
pub use episode::{sample_episode, DatasetView, Draw, Episode, Example, Restricted, TaskSource};
pub use idx::load_mnist_idx;
pub use imagedir::load_image_dir;
pub use sequence::{build_cl_sequence, sample_cl_sequence, ClSequence};
pub use split::{split_dataset, ClMode, OutputSpace, Split};
pub use synth::{synth_family, SynthFamily, SynthSpec, TransformSpec};
