pub mod audio_io;
pub mod augment;
pub mod cli;
pub mod energy;
pub mod nnrt;
pub mod preprocess;
pub mod trials;
