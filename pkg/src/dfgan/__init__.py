"""Progressive GAN with pixel-wise GGD aleatoric and MC-dropout epistemic uncertainty
for attenuation to dark-field radiograph translation."""

__version__ = "0.1.0"
