"""ClsNav - テキスト [CLS] トークンで画像エンコーダを誘導するゼロショットセグメンテーション実験ハーネス"""
