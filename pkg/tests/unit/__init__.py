"""ユニットテスト"""
