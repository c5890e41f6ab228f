"""事前学習・セグメンテーション学習"""
