"""ニューラルネットワーク層"""
