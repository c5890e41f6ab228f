"""合成コーパス（生成・fold分割・入出力・サンプラ）"""
