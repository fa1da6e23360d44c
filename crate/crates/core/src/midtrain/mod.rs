mod model;
mod run;
mod vocab;

pub use model::{
    decoder_loss, greedy_decode, greedy_from_memory, teacher_forcing, token_accuracy, translate_forward, AudioBatch,
    DecoderConfig, Memory, TranslateOutput, TranslationDecoder, TranslationModel,
};
pub use run::*;
pub use vocab::{TokenSequence, Vocab, BLANK, BOS, EOS, PAD, RESERVED};
