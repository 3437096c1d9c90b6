pub mod attention;
pub mod conv;
pub mod elementwise;
pub mod linalg;
pub mod norm;
pub mod pool;
pub mod resize;
pub mod shape;

pub use attention::{multi_head_self_attention, AttentionOutput, AttentionWeights};
pub use conv::{conv2d, conv_out_size, ConvOptions};
pub use elementwise::sigmoid_scalar;
pub use linalg::{bmm, linear};
pub use norm::{batch_norm, layer_norm, BatchStats, Mode, RunningStats, BN_EPS, BN_MOMENTUM};
pub use pool::{avg_pool2d, global_avg_pool};
pub use resize::bilinear_resize;
pub use shape::concat;
