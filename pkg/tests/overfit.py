"""Settings for the fixture overfit runs."""

OVERFIT = dict(d_h=64, heads=4, layers=2, learning_rate=1e-3, epochs=200, batch_size=8, max_seq_len=24,
               srd_alpha=3, seed=0)
