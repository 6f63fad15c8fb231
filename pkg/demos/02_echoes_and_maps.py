"""
From simulated echoes to range, frequency and range-Doppler maps
================================================================

The simulator renders one driver per recording: static cabin clutter, a
breathing torso and an activity-specific motion.  Each recording is a
fast-time x slow-time pulse matrix; the domain maps are views of it.
"""

import numpy as np

from uwbdar import domainmaps as dm
from uwbdar import uwbsim

subjects = uwbsim.make_subjects(2, seed=0)
archetypes = uwbsim.default_archetypes()
print("activities:", [a.label for a in archetypes])

pulses = uwbsim.generate_dataset(archetypes, subjects, 1)
print(len(pulses), "recordings of", pulses[0].data.shape, "(range bins x frames)")

# %%
# Range-time map: echo magnitude, cropped to the rows that hold the driver.
drink = next(p for p in pulses if p.label == "Drink")
roi = dm.crop(dm.range_map(drink), dm.CropSpec(*dm.ALERT_RANGE_ROI))
print("range ROI", roi.shape, "starting at bin", roi.row_axis.start)

# %%
# Frequency map: DFT along fast time, frame by frame.  The upper half of the
# spectrum is the band the classifier sees by default.
freq = dm.frequency_map(drink)
lo, hi = dm.band_rows("higher", freq.shape[0])
band = freq.data[lo:hi]
print("frequency map", freq.shape, "-> higher band", band.shape)

# %%
# Range-Doppler: DFT along slow time.  A static reflector sits in the centre
# column; motion spreads energy sideways.
rd = dm.range_doppler_map(drink).data
centre = rd.shape[1] // 2
moving = rd[:, np.r_[:centre - 2, centre + 3:rd.shape[1]]].sum() / rd.sum()
print(f"share of range-Doppler energy away from zero Doppler: {moving:.3f}")

# %%
# Shorter observation windows are plain slices of the slow-time axis.
for w in dm.window_slices(drink, 1.0)[:3]:
    print("window", w.data.shape)
