"""
Noise-trained CNN in a couple of minutes.

A coarse 15-degree grid, a small room and a small network: enough to see
the recipe work end to end. Training uses white noise only; testing uses
speech-shaped noise bursts the network has never heard.

With this little data and a 15 degree grid in a mild room, SRP-PHAT still
wins. The network pulls ahead with the desk-scale set in demo 04.

    python demos/03_train_small_network.py
"""

import tempfile
from pathlib import Path

from phasedoa import RoomSpec, build_grid, build_ula, cnn
from phasedoa.evaluate import load_conditions, run_experiment
from phasedoa.srp import build_steering_table
from phasedoa.synth import (SynthConfig, TestSetConfig, read_shard, speech_shaped_noise, synthesize_test_set,
                            synthesize_training_set)

geom, grid = build_ula(4, 0.03), build_grid(15)
room = RoomSpec((5, 5, 2.5), 0.2, name="R2")
work = Path(tempfile.mkdtemp())

cfg = SynthConfig([room], geom, grid, array_positions_per_room=1, source_distances=(1.0,),
                  utterance_length=1.0, utterances_per_condition=8, seed=7,
                  array_positions={0: [(2.5, 1.4, 1.2)]})
synthesize_training_set(cfg, work / "train.doas")
train = read_shard(work / "train.doas")
print(f"{train.frame_count} training frames over {grid.class_count} classes")

arch = cnn.Architecture((4, 129), grid.class_count, conv_filters=(16, 16, 16), dense_units=(128, 128))
net = cnn.Network(arch, seed=0)
cnn.train(net, train.phase_maps, train.labels,
          cnn.TrainConfig(batch_size=256, max_epochs=6, learning_rate=2e-3, seed=0),
          on_epoch=lambda r: print(f"  epoch {r['epoch']}: loss {r['train_loss']:.3f}"))

clips = [speech_shaped_noise(2.0, seed=100 + i) for i in range(grid.class_count)]
test = TestSetConfig(room, (2.5, 1.4, 1.2), 1.0, geom, grid, snr_db=(0.0, 10.0, 20.0),
                     clip_angles=tuple(grid.angles_deg), seed=3, name="R2")
manifest = synthesize_test_set(test, clips, work)
table = build_steering_table(geom, grid)
res = run_experiment(load_conditions(manifest, work), net, table)
for r in res.reports:
    print(f"{r.method:8s} {r.snr_db:4.0f} dB: {r.accuracy_pct:5.1f}% of {r.n_active} active frames")
print("chance level:", f"{100 / grid.class_count:.1f}%")
