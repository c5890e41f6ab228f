"""統合テスト"""
