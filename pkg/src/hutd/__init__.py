"""Self-supervised hyperspectral underwater target detection at desk scale.

Pipeline: synthesize or load a reflectance cube, learn a spectral embedding
with reference-guided clustering plus hybrid contrastive training, then score
pixels against the reference signature with SAM/CEM and evaluate via ROC/AUC.
"""

__version__ = "0.1.0"
