"""テストモジュール"""
