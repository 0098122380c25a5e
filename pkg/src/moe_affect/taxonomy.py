"""Fixed six-class emotion label space."""

EMOTIONS = ("neutral", "angry", "happy", "sad", "worried", "surprised")
N_CLASSES = len(EMOTIONS)
LABEL_INDEX = {name: i for i, name in enumerate(EMOTIONS)}

NEUTRAL = LABEL_INDEX["neutral"]
ANGRY = LABEL_INDEX["angry"]
HAPPY = LABEL_INDEX["happy"]
SAD = LABEL_INDEX["sad"]
WORRIED = LABEL_INDEX["worried"]
SURPRISED = LABEL_INDEX["surprised"]

# short column headers for distribution tables
ABBREV = ("neu", "ang", "hap", "sad", "wor", "sur")


class UnknownLabelError(ValueError):
    pass


def label_to_index(name):
    try:
        return LABEL_INDEX[name]
    except (KeyError, TypeError):
        raise UnknownLabelError(f"unknown emotion label {name!r}; expected one of {EMOTIONS}") from None


def index_to_label(idx):
    if not 0 <= int(idx) < N_CLASSES:
        raise UnknownLabelError(f"class index {idx} out of range 0..{N_CLASSES - 1}")
    return EMOTIONS[int(idx)]
