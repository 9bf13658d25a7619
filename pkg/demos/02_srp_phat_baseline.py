"""
The classical baseline.

SRP-PHAT steers the array to every grid angle and picks the loudest.
Without reverberation it is nearly perfect; the R1 room makes it much
harder.

    python demos/02_srp_phat_baseline.py
"""

import numpy as np

from phasedoa import Placement, RoomSpec, StftParams, build_grid, build_ula, render_array, stft
from phasedoa.srp import build_steering_table, srp_phat_scores
from phasedoa.synth import mix_at_snr, white_noise_source

geom, grid, params = build_ula(4, 0.03), build_grid(5), StftParams()
table = build_steering_table(geom, grid, params, sample_rate=16000)

for room in (RoomSpec((8, 8, 3), 0.0, name="anechoic"), RoomSpec((6, 6, 2.5), 0.3, name="R1")):
    exact = near = total = 0
    for i, angle in enumerate(grid.angles_deg[::3]):
        label = 3 * i
        y = render_array(room, Placement((3.0, 2.0, 1.3), float(angle), 2.0), geom,
                         white_noise_source(8000, seed=label))
        y = mix_at_snr(y, 20.0, rng=label)
        est = np.argmax(srp_phat_scores(stft(y, params).coefficients, table), axis=1)
        exact += int(np.sum(est == label))
        near += int(np.sum(np.abs(est - label) <= 1))
        total += len(est)
    print(f"{room.name:9s} 20 dB: exact {100 * exact / total:5.1f}%, within 5 deg {100 * near / total:5.1f}%")
