"""評価指標"""
