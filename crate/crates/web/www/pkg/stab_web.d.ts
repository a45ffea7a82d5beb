/* tslint:disable */
/* eslint-disable */

/**
 * Shaky clip with exact motion and smoothing warps.
 */
export class Demo {
    free(): void;
    [Symbol.dispose](): void;
    /**
     * Mean endpoint error of the estimated flow `a -> b` against the true motion.
     */
    flow_error(a: number, b: number): number;
    /**
     * The shaky input frame `k`.
     */
    input(k: number): Uint8Array;
    constructor(seed: number, size: number, frames: number, jitter: number);
    /**
     * Renders frame `k`; `lambda_s < 0` skips path adjustment.
     */
    render(k: number, _function: string, lambda_s: number): Rendered;
    /**
     * Visibility mask as RGBA bytes.
     */
    visibility(a: number, b: number): Uint8Array;
    readonly len: number;
    readonly size: number;
}

/**
 * A rendered frame with what it took to make it.
 */
export class Rendered {
    private constructor();
    free(): void;
    [Symbol.dispose](): void;
    /**
     * Hole pixels in red over transparent.
     */
    holes(): Uint8Array;
    pixels(): Uint8Array;
    readonly hole_fraction: number;
    readonly shift_x: number;
    readonly shift_y: number;
}

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_demo_free: (a: number, b: number) => void;
    readonly __wbg_rendered_free: (a: number, b: number) => void;
    readonly demo_flow_error: (a: number, b: number, c: number) => [number, number, number];
    readonly demo_input: (a: number, b: number) => [number, number, number, number];
    readonly demo_len: (a: number) => number;
    readonly demo_new: (a: number, b: number, c: number, d: number) => [number, number, number];
    readonly demo_render: (a: number, b: number, c: number, d: number, e: number) => [number, number, number];
    readonly demo_size: (a: number) => number;
    readonly demo_visibility: (a: number, b: number, c: number) => [number, number, number, number];
    readonly rendered_hole_fraction: (a: number) => number;
    readonly rendered_holes: (a: number) => [number, number];
    readonly rendered_pixels: (a: number) => [number, number];
    readonly rendered_shift_x: (a: number) => number;
    readonly rendered_shift_y: (a: number) => number;
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
