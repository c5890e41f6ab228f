"""E2Eテスト"""
