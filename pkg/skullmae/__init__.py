"""
Skull shape completion through masked-autoencoder training on synthetic defects
"""
