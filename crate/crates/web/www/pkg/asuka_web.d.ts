/* tslint:disable */
/* eslint-disable */

export class MaskDemo {
    private constructor();
    free(): void;
    [Symbol.dispose](): void;
    dilated(): Panel;
    /**
     * The low-resolution mask, shown at its own size.
     */
    jagged(): Panel;
    original(): Panel;
    readonly base: string;
    readonly combined: boolean;
    readonly dilated_ratio: number;
    readonly fallback: boolean;
    readonly ratio: number;
}

/**
 * An RGBA pixel buffer ready for `ImageData`.
 */
export class Panel {
    private constructor();
    free(): void;
    [Symbol.dispose](): void;
    rgba(): Uint8Array;
    readonly height: number;
    readonly width: number;
}

export class ShiftDemo {
    private constructor();
    free(): void;
    [Symbol.dispose](): void;
    /**
     * Shifted image with the boundary band tinted.
     */
    overlay(): Panel;
    shifted(): Panel;
    truth(): Panel;
    readonly band_pixels: number;
    /**
     * G@e of the shifted fill against the original.
     */
    readonly gae: number;
}

/**
 * A toy image whose masked rectangle is tinted by `shift` (added to red,
 * half to green, subtracted from blue), scored with G@e at `band_width`.
 */
export function color_shift_demo(seed: bigint, shift: number, band_width: number): ShiftDemo;

/**
 * One draw from the default mixture on a `side × side` frame, dilated by
 * `radius` pixels and downsampled by `factor` with nearest-neighbour picks.
 */
export function mask_demo(seed: bigint, side: number, radius: number, factor: number): MaskDemo;

/**
 * Probability of the reconstructed prior at steps `0..=max_step`.
 */
export function p_schedule(p0: number, p_final: number, decay_steps: number, max_step: number): Float64Array;

/**
 * `[a(0), b(0), a(1), b(1), ...]` for `family` = `diffusion` or `rectified-flow`.
 */
export function schedule_curves(family: string, steps: number): Float64Array;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_maskdemo_free: (a: number, b: number) => void;
    readonly __wbg_panel_free: (a: number, b: number) => void;
    readonly __wbg_shiftdemo_free: (a: number, b: number) => void;
    readonly color_shift_demo: (a: bigint, b: number, c: number) => [number, number, number];
    readonly mask_demo: (a: bigint, b: number, c: number, d: number) => [number, number, number];
    readonly maskdemo_base: (a: number) => [number, number];
    readonly maskdemo_combined: (a: number) => number;
    readonly maskdemo_dilated: (a: number) => number;
    readonly maskdemo_dilated_ratio: (a: number) => number;
    readonly maskdemo_fallback: (a: number) => number;
    readonly maskdemo_jagged: (a: number) => number;
    readonly maskdemo_original: (a: number) => number;
    readonly maskdemo_ratio: (a: number) => number;
    readonly p_schedule: (a: number, b: number, c: number, d: number) => [number, number];
    readonly panel_height: (a: number) => number;
    readonly panel_rgba: (a: number) => [number, number];
    readonly panel_width: (a: number) => number;
    readonly schedule_curves: (a: number, b: number, c: number) => [number, number, number, number];
    readonly shiftdemo_band_pixels: (a: number) => number;
    readonly shiftdemo_gae: (a: number) => number;
    readonly shiftdemo_overlay: (a: number) => number;
    readonly shiftdemo_shifted: (a: number) => number;
    readonly shiftdemo_truth: (a: number) => number;
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __externref_table_dealloc: (a: number) => void;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
    readonly __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
    readonly __wbindgen_start: () => void;
}

export type SyncInitInput = BufferSource | WebAssembly.Module;

/**
 * Instantiates the given `module`, which can either be bytes or
 * a precompiled `WebAssembly.Module`.
 *
 * @param {{ module: SyncInitInput }} module - Passing `SyncInitInput` directly is deprecated.
 *
 * @returns {InitOutput}
 */
export function initSync(module: { module: SyncInitInput } | SyncInitInput): InitOutput;

/**
 * If `module_or_path` is {RequestInfo} or {URL}, makes a request and
 * for everything else, calls `WebAssembly.instantiate` directly.
 *
 * @param {{ module_or_path: InitInput | Promise<InitInput> }} module_or_path - Passing `InitInput` directly is deprecated.
 *
 * @returns {Promise<InitOutput>}
 */
export default function __wbg_init (module_or_path?: { module_or_path: InitInput | Promise<InitInput> } | InitInput | Promise<InitInput>): Promise<InitOutput>;
