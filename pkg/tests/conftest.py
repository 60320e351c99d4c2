import numpy as np
import pytest

from cardioscreen import synth
from cardioscreen.signal_io import Waveform


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    """Small synthetic corpus shared by dataset/CLI tests (12 records)."""
    out = tmp_path_factory.mktemp("corpus")
    cfg = synth.SynthConfig(n_records=12, seed=11, duration_s=9.0,
                            abnormal_fraction=0.5, pcg_fs=2000, ecg_fs=500)
    summary = synth.synthesize_corpus(cfg, out)
    return {"dir": out, "summary": summary, "config": cfg}


def sine_wave(freq_hz: float, fs: int, duration_s: float, amp: float = 1.0) -> Waveform:
    t = np.arange(int(round(duration_s * fs))) / fs
    return Waveform(amp * np.sin(2 * np.pi * freq_hz * t), fs)
