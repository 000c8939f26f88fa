from .batching import Batch, Group, Span, assemble_batches, group_batch, iter_batches, make_spans
from .noise import NoiseVerdict, classify_recording, detect_noisy_patients, noise_report
from .records import (
    EPOCH_S,
    LabeledRecording,
    SleepLabel,
    SpectralSequence,
    SplitSpec,
    has_all_labels,
    list_raw_dataset,
    merge_rk_labels,
    read_feature_cache,
    read_raw_recording,
    split_patients,
    trim_wake_edges,
    windowize,
    write_feature_cache,
    write_raw_recording,
)
from .signal import bandpass_taps, fir_bandpass, preprocess_recording, resample, stft_features
from .synth import SynthSpec, inject_noise, sample_chain, stationary_distribution, synth_generate
