//! Stage orchestration for the frag4d pipeline binary.
