import struct

import numpy as np
import pytest

from cardioscreen import signal_io as sio

from conftest import sine_wave


def write_raw_wav(path, pcm_values, fs, n_channels=1, bits=16):
    """Hand-built RIFF/WAVE writer, independent of the module under test."""
    data = b"".join(struct.pack("<h", v) for v in pcm_values)
    block_align = n_channels * bits // 8
    header = b"RIFF"
    header += struct.pack("<I", 36 + len(data))
    header += b"WAVEfmt "
    header += struct.pack("<IHHIIHH", 16, 1, n_channels, fs,
                          fs * block_align, block_align, bits)
    header += b"data" + struct.pack("<I", len(data))
    path.write_bytes(header + data)


class TestReadWav:
    def test_zero_samples(self, tmp_path):
        p = tmp_path / "z.wav"
        write_raw_wav(p, [0, 0, 0], 2000)
        w = sio.read_wav_pcm16(p)
        assert w.fs == 2000
        assert np.array_equal(w.samples, np.zeros(3, np.float32))

    def test_hand_decoded_values(self, tmp_path):
        # 16384 -> 0.5 and 32767 -> 32767/32768, decoded from raw bytes
        p = tmp_path / "v.wav"
        write_raw_wav(p, [16384, 32767, -32768], 8000)
        w = sio.read_wav_pcm16(p)
        assert w.samples[0] == pytest.approx(0.5, abs=0)
        assert w.samples[1] == pytest.approx(32767 / 32768, abs=0)
        assert w.samples[2] == -1.0

    def test_rejects_stereo(self, tmp_path):
        p = tmp_path / "s.wav"
        write_raw_wav(p, [0, 0, 0, 0], 8000, n_channels=2)
        with pytest.raises(sio.FormatError, match="channels"):
            sio.read_wav_pcm16(p)

    def test_rejects_non_riff(self, tmp_path):
        p = tmp_path / "bad.wav"
        p.write_bytes(b"NOTRIFF isn't a wav file at all")
        with pytest.raises(sio.FormatError):
            sio.read_wav_pcm16(p)

    def test_rejects_8bit(self, tmp_path):
        p = tmp_path / "b8.wav"
        data = bytes([128, 128])
        header = b"RIFF" + struct.pack("<I", 36 + len(data)) + b"WAVEfmt "
        header += struct.pack("<IHHIIHH", 16, 1, 1, 8000, 8000, 1, 8)
        header += b"data" + struct.pack("<I", len(data))
        p.write_bytes(header + data)
        with pytest.raises(sio.FormatError, match="width"):
            sio.read_wav_pcm16(p)

    def test_roundtrip_within_lsb(self, tmp_path):
        rng = np.random.default_rng(3)
        w = sio.Waveform(rng.uniform(-1, 32767 / 32768, 500).astype(np.float32), 1000)
        p = tmp_path / "rt.wav"
        sio.write_wav_pcm16(p, w)
        back = sio.read_wav_pcm16(p)
        assert back.fs == w.fs
        assert np.max(np.abs(back.samples - w.samples)) <= 1 / 32768


class TestReadCsv:
    def test_zeros(self, tmp_path):
        p = tmp_path / "z.csv"
        p.write_text("0\n0\n0\n")
        w = sio.read_csv_signal(p, 300)
        assert w.fs == 300
        assert np.array_equal(w.samples, np.zeros(3, np.float32))

    def test_direct_parse(self, tmp_path):
        p = tmp_path / "v.csv"
        p.write_text("1.5\n-2.25\n")
        w = sio.read_csv_signal(p, 300)
        assert w.samples.tolist() == [1.5, -2.25]

    def test_crlf(self, tmp_path):
        p = tmp_path / "crlf.csv"
        p.write_bytes(b"0.5\r\n-0.5\r\n")
        assert sio.read_csv_signal(p, 300).samples.tolist() == [0.5, -0.5]

    def test_empty_file(self, tmp_path):
        p = tmp_path / "e.csv"
        p.write_text("")
        with pytest.raises(sio.FormatError, match="empty signal"):
            sio.read_csv_signal(p, 300)

    def test_bad_line_number(self, tmp_path):
        p = tmp_path / "b.csv"
        p.write_text("0.5\nnot-a-number\n")
        with pytest.raises(sio.FormatError, match="line 2"):
            sio.read_csv_signal(p, 300)


MANIFEST_HEADER = "record_id,label,pcg_path,ecg_path,fs_pcg,fs_ecg\n"


class TestManifest:
    def test_both_modalities(self, tmp_path):
        p = tmp_path / "m.csv"
        p.write_text(MANIFEST_HEADER + "a0001,abnormal,a0001.wav,a0001.csv,2000,300\n")
        entries = sio.read_manifest(p)
        assert len(entries) == 1
        e = entries[0]
        assert e.record_id == "a0001"
        assert e.label == "abnormal"
        assert e.pcg_path == "a0001.wav" and e.ecg_path == "a0001.csv"
        assert e.fs_pcg == 2000 and e.fs_ecg == 300

    def test_duplicate_id(self, tmp_path):
        p = tmp_path / "m.csv"
        p.write_text(
            MANIFEST_HEADER
            + "a0001,normal,a.wav,,2000,\n"
            + "a0001,normal,b.wav,,2000,\n"
        )
        with pytest.raises(sio.FormatError, match="duplicate"):
            sio.read_manifest(p)

    def test_case_insensitive_label(self, tmp_path):
        p = tmp_path / "m.csv"
        p.write_text(MANIFEST_HEADER + "a0001,ABNORMAL,a.wav,,2000,\n")
        assert sio.read_manifest(p)[0].label == "abnormal"

    def test_unknown_label(self, tmp_path):
        p = tmp_path / "m.csv"
        p.write_text(MANIFEST_HEADER + "a0001,maybe,a.wav,,2000,\n")
        with pytest.raises(sio.FormatError, match="label"):
            sio.read_manifest(p)

    def test_no_modalities(self, tmp_path):
        p = tmp_path / "m.csv"
        p.write_text(MANIFEST_HEADER + "a0001,normal,,,,\n")
        with pytest.raises(sio.FormatError, match="modality"):
            sio.read_manifest(p)

    def test_pure_function_of_bytes(self, tmp_path):
        text = MANIFEST_HEADER + "a1,normal,a.wav,,2000,\nb2,abnormal,,b.csv,,300\n"
        p1, p2 = tmp_path / "m1.csv", tmp_path / "m2.csv"
        p1.write_text(text)
        p2.write_text(text)
        assert sio.read_manifest(p1) == sio.read_manifest(p2)

    def test_write_read_roundtrip(self, tmp_path):
        entries = [
            sio.ManifestEntry("a1", "normal", "a1.wav", "a1.csv", 2000, 500),
            sio.ManifestEntry("b2", "abnormal", None, "b2.csv", None, 300),
        ]
        p = tmp_path / "m.csv"
        sio.write_manifest(p, entries)
        assert sio.read_manifest(p) == entries


def dft_peak(w: sio.Waveform):
    spectrum = np.abs(np.fft.rfft(w.samples.astype(np.float64)))
    freqs = np.fft.rfftfreq(w.samples.size, 1.0 / w.fs)
    k = int(spectrum.argmax())
    return freqs[k], 2.0 * spectrum[k] / w.samples.size


class TestResample:
    def test_identity(self):
        w = sine_wave(10, 2000, 1.0)
        out = sio.resample(w, 2000)
        assert out.fs == 2000
        assert np.array_equal(out.samples, w.samples)

    def test_constant_preserved(self):
        for fs, target in [(2000, 1000), (500, 300), (300, 500), (777, 1000)]:
            w = sio.Waveform(np.full(3 * fs, 0.7, np.float32), fs)
            out = sio.resample(w, target)
            assert np.max(np.abs(out.samples - 0.7)) < 1e-6, (fs, target)

    def test_duration_within_one_sample(self):
        w = sine_wave(10, 2000, 3.3)
        out = sio.resample(w, 300)
        assert abs(out.duration - w.duration) <= 1.0 / 300

    def test_sine_peak_preserved(self):
        # DFT-peak oracle on both signals: 10 Hz stays dominant, amplitude
        # within 2 percent after 2000 -> 1000 Hz
        w = sine_wave(10, 2000, 2.0)
        f_in, a_in = dft_peak(w)
        out = sio.resample(w, 1000)
        f_out, a_out = dft_peak(out)
        assert f_in == pytest.approx(10.0, abs=0.5)
        assert f_out == pytest.approx(10.0, abs=0.5)
        assert a_out == pytest.approx(a_in, rel=0.02)

    def test_roundtrip_rms_below_1pct(self):
        # band-limited content only (well under 0.45 * 300 Hz)
        rng = np.random.default_rng(5)
        t = np.arange(4000) / 1000.0
        x = sum(rng.uniform(0.2, 1.0) * np.sin(2 * np.pi * f * t + rng.uniform(0, 6))
                for f in (5, 17, 40, 90))
        w = sio.Waveform(x / np.max(np.abs(x)), 1000)
        back = sio.resample(sio.resample(w, 300), 1000)
        n = min(back.samples.size, w.samples.size)
        err = back.samples[:n].astype(np.float64) - w.samples[:n]
        rms = np.sqrt(np.mean(w.samples.astype(np.float64) ** 2))
        assert np.sqrt(np.mean(err**2)) < 0.01 * rms

    def test_rejects_bad_rate(self):
        w = sine_wave(10, 2000, 0.5)
        with pytest.raises(ValueError):
            sio.resample(w, 0)
