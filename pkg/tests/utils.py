import os
import shutil

import numpy as np

from neurospike.eeg import CHANNELS, EegRecording, Marker
from neurospike.layers import Module
from neurospike.tensor import Tensor

TEST_CASE_DIR = "tests/test_cases/"


def copy_dir_to_tmp_path(scenario_dir, tmp_path):
    # Copy the scenario directory to a temporary directory
    for item in os.listdir(scenario_dir):
        s = os.path.join(scenario_dir, item)
        d = os.path.join(tmp_path, item)
        if os.path.isdir(s):
            shutil.copytree(s, d, dirs_exist_ok=True)
        else:
            shutil.copy2(s, d)


def to_double(module: Module) -> Module:
    """Switch every parameter of ``module`` to float64 in place."""
    for tensor in module.parameters():
        tensor.data = tensor.data.astype(np.float64)
    return module


def double(shape, seed=0, scale=1.0, requires_grad=True) -> Tensor:
    generator = np.random.default_rng(seed)
    return Tensor(
        scale * generator.standard_normal(shape),
        requires_grad=requires_grad,
        dtype=np.float64,
    )


def toy_epochs(n_per_class=10, shape=(19, 24), seed=0):
    """
    Separable epochs in [0, 1]: class 1 carries a falling ramp on the
    first rows, class 0 is noise around 0.5.
    """
    generator = np.random.default_rng(seed)
    n = 2 * n_per_class
    data = 0.5 + 0.05 * generator.standard_normal((n, *shape))
    labels = np.array([0] * n_per_class + [1] * n_per_class)
    ramp = np.linspace(0.4, -0.4, shape[1])
    data[labels == 1, :6, :] += ramp
    return np.clip(data, 0, 1).astype(np.float32), labels


def countdown_recording(
    spacing=500,
    lead=1500,
    tail=200,
    fs=500.0,
    value=0.0,
    trial_id="trial",
) -> EegRecording:
    """Flat recording with the six countdown markers at fixed spacing."""
    samples = [lead + index * spacing for index in range(6)]
    markers = [
        Marker(label=label, sample=sample)
        for label, sample in zip(("5", "4", "3", "2", "1", "STOP"), samples)
    ]
    data = np.full((len(CHANNELS), samples[-1] + tail), value, np.float32)
    return EegRecording(
        data=data, fs=fs, markers=markers, trial_id=trial_id
    )
