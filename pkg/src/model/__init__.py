"""テキスト/ビジュアルエンコーダ、条件付け機構、デコーダ"""
