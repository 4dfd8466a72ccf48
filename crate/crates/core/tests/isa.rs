use iced_x86::{Decoder, DecoderOptions, Formatter, IntelFormatter, Mnemonic};
use mmdsfi::isa::{
    decode, encode, AluImmOp, AluOp, BndOperand, BoundSide, Cond, InstrClass, Instruction,
    MemOperand, Op, Reg, MAGIC,
};
use proptest::prelude::*;

fn reference(bytes: &[u8]) -> iced_x86::Instruction {
    let mut d = Decoder::with_ip(64, bytes, 0, DecoderOptions::MPX);
    d.decode()
}

fn reference_text(bytes: &[u8]) -> String {
    let ins = reference(bytes);
    let mut out = String::new();
    IntelFormatter::new().format(&ins, &mut out);
    out
}

#[test]
fn rip_relative_indirect_jump_matches_reference() {
    let bytes = [0xFF, 0x25, 0x10, 0x00, 0x00, 0x00];
    let ours = decode(&bytes, 0).unwrap();
    assert_eq!(ours.class(), InstrClass::IndirectJumpMem);
    assert_eq!(ours.op, Op::JmpMem(MemOperand::RipRelative { disp: 0x10 }));
    let theirs = reference(&bytes);
    assert_eq!(theirs.mnemonic(), Mnemonic::Jmp);
    assert_eq!(theirs.len(), ours.len());
    assert!(theirs.is_ip_rel_memory_operand());
}

#[test]
fn bndcl_encoding_matches_reference() {
    let op = Op::BndCheck {
        side: BoundSide::Lower,
        bnd: 0,
        operand: BndOperand::Mem(MemOperand::base(Reg::R8, 0)),
    };
    let bytes = encode(&Instruction::new(0, op).unwrap()).unwrap();
    let theirs = reference(&bytes);
    assert_eq!(theirs.mnemonic(), Mnemonic::Bndcl);
    assert_eq!(theirs.len(), bytes.len());
    assert_eq!(reference_text(&bytes), "bndcl bnd0,[r8]");
}

#[test]
fn cfi_label_is_a_nop_to_the_reference() {
    let bytes = [0x0F, 0x1F, 0x84, 0x24, 0x2A, 0, 0, 0];
    let theirs = reference(&bytes);
    assert_eq!(theirs.mnemonic(), Mnemonic::Nop);
    assert_eq!(theirs.len(), 8);
}

fn arb_reg() -> impl Strategy<Value = Reg> {
    (0u8..16).prop_map(Reg::from_index)
}

fn arb_mem() -> impl Strategy<Value = MemOperand> {
    let disp = prop_oneof![Just(0i32), -128i32..128, any::<i32>()];
    prop_oneof![
        (arb_reg(), disp.clone()).prop_map(|(base, disp)| MemOperand::BaseDisp { base, disp }),
        (
            arb_reg(),
            arb_reg().prop_filter("rsp is not an index", |r| *r != Reg::Rsp),
            prop::sample::select(vec![1u8, 2, 4, 8]),
            disp.clone()
        )
            .prop_map(|(base, index, scale, disp)| MemOperand::BaseIndexDisp {
                base,
                index,
                scale,
                disp
            }),
        any::<i32>().prop_map(|disp| MemOperand::RipRelative { disp }),
    ]
}

fn arb_op() -> impl Strategy<Value = Op> {
    let target = 0i64..100_000;
    prop_oneof![
        (arb_reg(), any::<i64>()).prop_map(|(dst, imm)| Op::MovImm { dst, imm }),
        (arb_reg(), arb_reg()).prop_map(|(dst, src)| Op::MovRR { dst, src }),
        (arb_reg(), arb_mem()).prop_map(|(dst, mem)| Op::Load { dst, mem }),
        (arb_mem(), arb_reg()).prop_map(|(mem, src)| Op::Store { mem, src }),
        (arb_reg(), arb_mem()).prop_map(|(dst, mem)| Op::Lea { dst, mem }),
        any::<u64>().prop_map(|addr| Op::LoadAbs { addr }),
        any::<u64>().prop_map(|addr| Op::StoreAbs { addr }),
        (any::<bool>(), arb_reg(), any::<i32>()).prop_map(|(add, dst, imm)| Op::AluImm {
            op: if add { AluImmOp::Add } else { AluImmOp::Sub },
            dst,
            imm
        }),
        (prop::sample::select(AluOp::ALL.to_vec()), arb_reg(), arb_reg())
            .prop_map(|(op, dst, src)| Op::Alu { op, dst, src }),
        arb_reg().prop_map(Op::Push),
        arb_reg().prop_map(Op::Pop),
        target.clone().prop_map(|target| Op::Jmp { target, short: false }),
        (prop::sample::select(Cond::ALL.to_vec()), target.clone())
            .prop_map(|(cond, target)| Op::Jcc { cond, target }),
        target.prop_map(|target| Op::Call { target }),
        arb_reg().prop_map(Op::JmpReg),
        arb_reg().prop_map(Op::CallReg),
        arb_mem().prop_map(Op::JmpMem),
        arb_mem().prop_map(Op::CallMem),
        Just(Op::Ret),
        Just(Op::Nop),
        any::<u32>().prop_map(|domain_id| Op::CfiLabel { domain_id }),
        (any::<bool>(), 0u8..4, arb_reg()).prop_map(|(lo, bnd, r)| Op::BndCheck {
            side: if lo { BoundSide::Lower } else { BoundSide::Upper },
            bnd,
            operand: BndOperand::Reg(r)
        }),
        (any::<bool>(), 0u8..4, arb_mem()).prop_map(|(lo, bnd, m)| Op::BndCheck {
            side: if lo { BoundSide::Lower } else { BoundSide::Upper },
            bnd,
            operand: BndOperand::Mem(m)
        }),
        Just(Op::SyscallGate),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    #[test]
    fn decode_encode_identity(op in arb_op(), addr in 0u64..1000) {
        let ins = Instruction::new(addr, op).unwrap();
        let mut code = vec![0x90; addr as usize];
        code.extend_from_slice(&ins.raw);
        let back = decode(&code, addr as usize).unwrap();
        prop_assert_eq!(&back, &ins);
        prop_assert_eq!(encode(&back).unwrap(), ins.raw.clone());
    }

    #[test]
    fn lengths_agree_with_reference(op in arb_op()) {
        let ins = Instruction::new(0, op).unwrap();
        let theirs = reference(&ins.raw);
        prop_assert!(!theirs.is_invalid(), "reference rejects {:02x?}", ins.raw);
        prop_assert_eq!(theirs.len(), ins.len(), "{} {:02x?}", ins, ins.raw);
    }

    #[test]
    fn magic_only_starts_labels(op in arb_op()) {
        let ins = Instruction::new(0, op).unwrap();
        let is_label = matches!(ins.op, Op::CfiLabel { .. });
        prop_assert_eq!(ins.raw.starts_with(&MAGIC), is_label);
    }

    #[test]
    fn encode_of_decoded_bytes_is_identity(bytes in proptest::collection::vec(any::<u8>(), 1..16)) {
        if let Ok(ins) = decode(&bytes, 0) {
            prop_assert_eq!(&bytes[..ins.len()], &encode(&ins).unwrap()[..]);
        }
    }
}
