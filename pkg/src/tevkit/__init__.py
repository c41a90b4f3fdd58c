"""tevkit: speaker verification on short non-linguistic vocal events.

The toolkit covers two verification pipelines over the same corpora:

* a statistical one: MFCC front end, diagonal-covariance UBM,
  total-variability i-vectors, cosine/LDA/PLDA scoring;
* a neural one: spliced Fbank front end, convolutional + time-delay
  network trained to classify speakers, d-vectors by frame averaging.

Evaluation utilities generate exhaustive or human-protocol trial lists
and compute EER/DER.  A small HTTP service administers human listening
tests, and ``tevkit.viz`` projects frame-level features to 2-D for
disguise analysis.
"""

__version__ = "0.1.0"
