/** Run-length codec for binary masks: alternating run lengths, zeros first. */

export function rleDecode(runs: number[], size: number): Uint8Array {
  const out = new Uint8Array(size);
  let pos = 0;
  let val = 0;
  for (const r of runs) {
    if (val === 1) out.fill(1, pos, pos + r);
    pos += r;
    val ^= 1;
  }
  if (pos !== size) {
    throw new Error(`run lengths sum to ${pos}, expected ${size}`);
  }
  return out;
}

export function rleEncode(mask: Uint8Array): number[] {
  const runs: number[] = [];
  if (mask.length === 0) return runs;
  let val: number = mask[0] ? 1 : 0;
  if (val === 1) runs.push(0);
  let run = 0;
  for (const m of mask) {
    const bit = m ? 1 : 0;
    if (bit === val) {
      run += 1;
    } else {
      runs.push(run);
      val = bit;
      run = 1;
    }
  }
  runs.push(run);
  return runs;
}
