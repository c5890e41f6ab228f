"""ユーティリティ関数のモジュール"""
