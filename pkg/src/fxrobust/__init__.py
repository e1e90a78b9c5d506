"""Instrument classification under audio effects: augmentation, log-mel features,
a from-scratch single-layer CNN, and the train/evaluate experiment grid."""

__version__ = "0.1.0"

FAMILIES = (
    "bass",
    "brass",
    "flute",
    "guitar",
    "keyboard",
    "mallet",
    "organ",
    "reed",
    "string",
    "synth_lead",
    "vocal",
)
N_CLASSES = len(FAMILIES)
SAMPLE_RATE = 16000
CLIP_SECONDS = 4.0
