/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const __wbg_maskdemo_free: (a: number, b: number) => void;
export const __wbg_panel_free: (a: number, b: number) => void;
export const __wbg_shiftdemo_free: (a: number, b: number) => void;
export const color_shift_demo: (a: bigint, b: number, c: number) => [number, number, number];
export const mask_demo: (a: bigint, b: number, c: number, d: number) => [number, number, number];
export const maskdemo_base: (a: number) => [number, number];
export const maskdemo_combined: (a: number) => number;
export const maskdemo_dilated: (a: number) => number;
export const maskdemo_dilated_ratio: (a: number) => number;
export const maskdemo_fallback: (a: number) => number;
export const maskdemo_jagged: (a: number) => number;
export const maskdemo_original: (a: number) => number;
export const maskdemo_ratio: (a: number) => number;
export const p_schedule: (a: number, b: number, c: number, d: number) => [number, number];
export const panel_height: (a: number) => number;
export const panel_rgba: (a: number) => [number, number];
export const panel_width: (a: number) => number;
export const schedule_curves: (a: number, b: number, c: number) => [number, number, number, number];
export const shiftdemo_band_pixels: (a: number) => number;
export const shiftdemo_gae: (a: number) => number;
export const shiftdemo_overlay: (a: number) => number;
export const shiftdemo_shifted: (a: number) => number;
export const shiftdemo_truth: (a: number) => number;
export const __wbindgen_externrefs: WebAssembly.Table;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_malloc: (a: number, b: number) => number;
export const __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
export const __wbindgen_start: () => void;
