#![allow(dead_code)]

use graphkd::{Config, Workspace};

/// A grid small enough to run end to end in seconds.
pub const TINY: &str = "\
data.clips = 40
data.classes = 4
data.train = 24
data.val = 8
data.pretext_clips = 16
data.frames = 4
data.height = 8
data.width = 8
data.object_size = 3
data.noise = 0.2
data.distractors = 0
pretext.patch = 4
teachers = S,T,P
teacher.blocks = 4p,4p
student.blocks = 2p,4p
pretrain.epochs = 1
finetune.epochs = 1
distill.epochs = 3
distill.batch_size = 8
distill.sketch_dim = 16
ablation.seeds = 0,1
ablation.modes = scratch,gl_gr
";

pub fn tiny() -> Config {
    Config::parse(TINY).unwrap()
}

pub fn workspace(dir: &std::path::Path, cfg: Config) -> Workspace {
    Workspace::new(dir, cfg)
}
