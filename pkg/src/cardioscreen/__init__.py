"""Dual-modality (PCG + ECG) cardiac abnormality screening pipeline.

Submodules: signal_io (waveforms, manifests, resampling), dsp (CWT and
scalograms), segmentation (peak detection, windowing), dataset (splits,
balancing, builds, batching), neuralnet (layers, loss, ADAM), models
(architectures, training, transplant, checkpoints), evalx (metrics, ROC,
thresholds), synth (synthetic corpus), cli (command-line pipeline).
"""

__version__ = "0.1.0"
