import numpy as np
import pytest

from tevkit.corpus import AudioSegment, SynthSpec, synth_corpus


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    """6 speakers x 4 utts x 2 events, shared by everything needing audio."""
    root = tmp_path_factory.mktemp("smallcorpus")
    spec = SynthSpec(n_speakers=6, utts_per_speaker_per_event=4,
                     events=("cough", "hmm"), seed=7)
    return synth_corpus(spec, root)


@pytest.fixture()
def tone_segment():
    """0.4 s of a 440 Hz tone at 16 kHz."""
    t = np.arange(int(0.4 * 16000)) / 16000.0
    return AudioSegment(0.5 * np.sin(2 * np.pi * 440.0 * t), sample_rate=16000)
