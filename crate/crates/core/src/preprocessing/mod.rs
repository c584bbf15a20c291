//! Turning raw recordings, photographs and questionnaire answers into model
//! inputs.

mod gain;
mod resize;
mod io;
mod mel;
mod piq;

pub use gain::{effective_gain, GainStats};
pub use resize::downsample_image;
pub use io::{load_image, load_spectrogram, read_image, read_npy, read_wav, write_npy, write_wav};
pub use mel::{hz_to_mel, log_mel_spectrogram, mel_band_edges, mel_filterbank, mel_to_hz, MelParams, LOG_OFFSET};
pub use piq::{encode_participant, PiqKind, PiqSchema, PiqVariable};
