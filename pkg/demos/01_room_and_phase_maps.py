"""
From a room to a phase map.

Simulates the reverberant R1 room, checks how fast its impulse response
decays, renders white noise from 60 degrees onto the 4-mic array and looks
at the STFT phase map the classifier consumes.

    python demos/01_room_and_phase_maps.py
"""

import numpy as np

from phasedoa import (Placement, RoomSpec, StftParams, build_ula, decay_time, farfield_delays, phase_maps,
                      render_array, simulate_rir, stft)

room = RoomSpec((6.0, 6.0, 2.5), rt60=0.3, name="R1")
geom = build_ula(4, 0.03)

# One impulse response, and the time its Schroeder curve needs to fall by 60 dB.
h = simulate_rir(room, source=(2.0, 2.5, 1.5), mic=(3.2, 3.9, 1.5))
print(f"RIR: {len(h)} samples, -60 dB after {decay_time(h):.3f} s (requested {room.rt60} s)")

# Render one second of white noise from 60 degrees, 2 m away.
placement = Placement(array_center=(3.0, 2.0, 1.3), source_angle=60.0, source_distance=2.0)
noise = np.random.default_rng(0).standard_normal(16000)
mics = render_array(room, placement, geom, noise)
print(f"rendered signals: {mics.shape} (mics x samples)")

# The feature: per frame, the wrapped STFT phase of every mic and bin.
maps = phase_maps(stft(mics, StftParams()))
print(f"phase maps: {maps.shape} (frames x mics x bins), range [{maps.min():.3f}, {maps.max():.3f}]")

# In the direct path, neighbouring mics differ by a plane-wave delay.
step = np.diff(farfield_delays(geom, 60.0))[0]
k = 16
expected = np.angle(np.exp(-2j * np.pi * k * 16000 / 256 * step))
measured = np.angle(np.mean(np.exp(1j * (maps[:, 1, k] - maps[:, 0, k]))))
print(f"bin {k}: expected inter-mic phase {expected:+.3f} rad, "
      f"frame-averaged {measured:+.3f} rad (reverberation blurs it)")
