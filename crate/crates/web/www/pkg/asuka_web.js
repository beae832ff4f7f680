/* @ts-self-types="./asuka_web.d.ts" */

export class MaskDemo {
    static __wrap(ptr) {
        const obj = Object.create(MaskDemo.prototype);
        obj.__wbg_ptr = ptr;
        MaskDemoFinalization.register(obj, obj.__wbg_ptr, obj);
        return obj;
    }
    __destroy_into_raw() {
        const ptr = this.__wbg_ptr;
        this.__wbg_ptr = 0;
        MaskDemoFinalization.unregister(this);
        return ptr;
    }
    free() {
        const ptr = this.__destroy_into_raw();
        wasm.__wbg_maskdemo_free(ptr, 0);
    }
    /**
     * @returns {string}
     */
    get base() {
        let deferred1_0;
        let deferred1_1;
        try {
            const ret = wasm.maskdemo_base(this.__wbg_ptr);
            deferred1_0 = ret[0];
            deferred1_1 = ret[1];
            return getStringFromWasm0(ret[0], ret[1]);
        } finally {
            wasm.__wbindgen_free(deferred1_0, deferred1_1, 1);
        }
    }
    /**
     * @returns {boolean}
     */
    get combined() {
        const ret = wasm.maskdemo_combined(this.__wbg_ptr);
        return ret !== 0;
    }
    /**
     * @returns {Panel}
     */
    dilated() {
        const ret = wasm.maskdemo_dilated(this.__wbg_ptr);
        return Panel.__wrap(ret);
    }
    /**
     * @returns {number}
     */
    get dilated_ratio() {
        const ret = wasm.maskdemo_dilated_ratio(this.__wbg_ptr);
        return ret;
    }
    /**
     * @returns {boolean}
     */
    get fallback() {
        const ret = wasm.maskdemo_fallback(this.__wbg_ptr);
        return ret !== 0;
    }
    /**
     * The low-resolution mask, shown at its own size.
     * @returns {Panel}
     */
    jagged() {
        const ret = wasm.maskdemo_jagged(this.__wbg_ptr);
        return Panel.__wrap(ret);
    }
    /**
     * @returns {Panel}
     */
    original() {
        const ret = wasm.maskdemo_original(this.__wbg_ptr);
        return Panel.__wrap(ret);
    }
    /**
     * @returns {number}
     */
    get ratio() {
        const ret = wasm.maskdemo_ratio(this.__wbg_ptr);
        return ret;
    }
}
if (Symbol.dispose) MaskDemo.prototype[Symbol.dispose] = MaskDemo.prototype.free;

/**
 * An RGBA pixel buffer ready for `ImageData`.
 */
export class Panel {
    static __wrap(ptr) {
        const obj = Object.create(Panel.prototype);
        obj.__wbg_ptr = ptr;
        PanelFinalization.register(obj, obj.__wbg_ptr, obj);
        return obj;
    }
    __destroy_into_raw() {
        const ptr = this.__wbg_ptr;
        this.__wbg_ptr = 0;
        PanelFinalization.unregister(this);
        return ptr;
    }
    free() {
        const ptr = this.__destroy_into_raw();
        wasm.__wbg_panel_free(ptr, 0);
    }
    /**
     * @returns {number}
     */
    get height() {
        const ret = wasm.panel_height(this.__wbg_ptr);
        return ret >>> 0;
    }
    /**
     * @returns {Uint8Array}
     */
    rgba() {
        const ret = wasm.panel_rgba(this.__wbg_ptr);
        var v1 = getArrayU8FromWasm0(ret[0], ret[1]).slice();
        wasm.__wbindgen_free(ret[0], ret[1] * 1, 1);
        return v1;
    }
    /**
     * @returns {number}
     */
    get width() {
        const ret = wasm.panel_width(this.__wbg_ptr);
        return ret >>> 0;
    }
}
if (Symbol.dispose) Panel.prototype[Symbol.dispose] = Panel.prototype.free;

export class ShiftDemo {
    static __wrap(ptr) {
        const obj = Object.create(ShiftDemo.prototype);
        obj.__wbg_ptr = ptr;
        ShiftDemoFinalization.register(obj, obj.__wbg_ptr, obj);
        return obj;
    }
    __destroy_into_raw() {
        const ptr = this.__wbg_ptr;
        this.__wbg_ptr = 0;
        ShiftDemoFinalization.unregister(this);
        return ptr;
    }
    free() {
        const ptr = this.__destroy_into_raw();
        wasm.__wbg_shiftdemo_free(ptr, 0);
    }
    /**
     * @returns {number}
     */
    get band_pixels() {
        const ret = wasm.shiftdemo_band_pixels(this.__wbg_ptr);
        return ret >>> 0;
    }
    /**
     * G@e of the shifted fill against the original.
     * @returns {number}
     */
    get gae() {
        const ret = wasm.shiftdemo_gae(this.__wbg_ptr);
        return ret;
    }
    /**
     * Shifted image with the boundary band tinted.
     * @returns {Panel}
     */
    overlay() {
        const ret = wasm.shiftdemo_overlay(this.__wbg_ptr);
        return Panel.__wrap(ret);
    }
    /**
     * @returns {Panel}
     */
    shifted() {
        const ret = wasm.shiftdemo_shifted(this.__wbg_ptr);
        return Panel.__wrap(ret);
    }
    /**
     * @returns {Panel}
     */
    truth() {
        const ret = wasm.shiftdemo_truth(this.__wbg_ptr);
        return Panel.__wrap(ret);
    }
}
if (Symbol.dispose) ShiftDemo.prototype[Symbol.dispose] = ShiftDemo.prototype.free;

/**
 * A toy image whose masked rectangle is tinted by `shift` (added to red,
 * half to green, subtracted from blue), scored with G@e at `band_width`.
 * @param {bigint} seed
 * @param {number} shift
 * @param {number} band_width
 * @returns {ShiftDemo}
 */
export function color_shift_demo(seed, shift, band_width) {
    const ret = wasm.color_shift_demo(seed, shift, band_width);
    if (ret[2]) {
        throw takeFromExternrefTable0(ret[1]);
    }
    return ShiftDemo.__wrap(ret[0]);
}

/**
 * One draw from the default mixture on a `side × side` frame, dilated by
 * `radius` pixels and downsampled by `factor` with nearest-neighbour picks.
 * @param {bigint} seed
 * @param {number} side
 * @param {number} radius
 * @param {number} factor
 * @returns {MaskDemo}
 */
export function mask_demo(seed, side, radius, factor) {
    const ret = wasm.mask_demo(seed, side, radius, factor);
    if (ret[2]) {
        throw takeFromExternrefTable0(ret[1]);
    }
    return MaskDemo.__wrap(ret[0]);
}

/**
 * Probability of the reconstructed prior at steps `0..=max_step`.
 * @param {number} p0
 * @param {number} p_final
 * @param {number} decay_steps
 * @param {number} max_step
 * @returns {Float64Array}
 */
export function p_schedule(p0, p_final, decay_steps, max_step) {
    const ret = wasm.p_schedule(p0, p_final, decay_steps, max_step);
    var v1 = getArrayF64FromWasm0(ret[0], ret[1]).slice();
    wasm.__wbindgen_free(ret[0], ret[1] * 8, 8);
    return v1;
}

/**
 * `[a(0), b(0), a(1), b(1), ...]` for `family` = `diffusion` or `rectified-flow`.
 * @param {string} family
 * @param {number} steps
 * @returns {Float64Array}
 */
export function schedule_curves(family, steps) {
    const ptr0 = passStringToWasm0(family, wasm.__wbindgen_malloc, wasm.__wbindgen_realloc);
    const len0 = WASM_VECTOR_LEN;
    const ret = wasm.schedule_curves(ptr0, len0, steps);
    if (ret[3]) {
        throw takeFromExternrefTable0(ret[2]);
    }
    var v2 = getArrayF64FromWasm0(ret[0], ret[1]).slice();
    wasm.__wbindgen_free(ret[0], ret[1] * 8, 8);
    return v2;
}
function __wbg_get_imports() {
    const import0 = {
        __proto__: null,
        __wbg_Error_30c8987f7c2ed4e2: function(arg0, arg1) {
            const ret = Error(getStringFromWasm0(arg0, arg1));
            return ret;
        },
        __wbg___wbindgen_throw_41e9ee4f547fc59a: function(arg0, arg1) {
            throw new Error(getStringFromWasm0(arg0, arg1));
        },
        __wbindgen_init_externref_table: function() {
            const table = wasm.__wbindgen_externrefs;
            const offset = table.grow(4);
            table.set(0, undefined);
            table.set(offset + 0, undefined);
            table.set(offset + 1, null);
            table.set(offset + 2, true);
            table.set(offset + 3, false);
        },
    };
    return {
        __proto__: null,
        "./asuka_web_bg.js": import0,
    };
}

const MaskDemoFinalization = (typeof FinalizationRegistry === 'undefined')
    ? { register: () => {}, unregister: () => {} }
    : new FinalizationRegistry(ptr => wasm.__wbg_maskdemo_free(ptr, 1));
const PanelFinalization = (typeof FinalizationRegistry === 'undefined')
    ? { register: () => {}, unregister: () => {} }
    : new FinalizationRegistry(ptr => wasm.__wbg_panel_free(ptr, 1));
const ShiftDemoFinalization = (typeof FinalizationRegistry === 'undefined')
    ? { register: () => {}, unregister: () => {} }
    : new FinalizationRegistry(ptr => wasm.__wbg_shiftdemo_free(ptr, 1));

function getArrayF64FromWasm0(ptr, len) {
    ptr = ptr >>> 0;
    return getFloat64ArrayMemory0().subarray(ptr / 8, ptr / 8 + len);
}

function getArrayU8FromWasm0(ptr, len) {
    ptr = ptr >>> 0;
    return getUint8ArrayMemory0().subarray(ptr / 1, ptr / 1 + len);
}

let cachedFloat64ArrayMemory0 = null;
function getFloat64ArrayMemory0() {
    if (cachedFloat64ArrayMemory0 === null || cachedFloat64ArrayMemory0.byteLength === 0) {
        cachedFloat64ArrayMemory0 = new Float64Array(wasm.memory.buffer);
    }
    return cachedFloat64ArrayMemory0;
}

function getStringFromWasm0(ptr, len) {
    return decodeText(ptr >>> 0, len);
}

let cachedUint8ArrayMemory0 = null;
function getUint8ArrayMemory0() {
    if (cachedUint8ArrayMemory0 === null || cachedUint8ArrayMemory0.byteLength === 0) {
        cachedUint8ArrayMemory0 = new Uint8Array(wasm.memory.buffer);
    }
    return cachedUint8ArrayMemory0;
}

function passStringToWasm0(arg, malloc, realloc) {
    if (realloc === undefined) {
        const buf = cachedTextEncoder.encode(arg);
        const ptr = malloc(buf.length, 1) >>> 0;
        getUint8ArrayMemory0().subarray(ptr, ptr + buf.length).set(buf);
        WASM_VECTOR_LEN = buf.length;
        return ptr;
    }

    let len = arg.length;
    let ptr = malloc(len, 1) >>> 0;

    const mem = getUint8ArrayMemory0();

    let offset = 0;

    for (; offset < len; offset++) {
        const code = arg.charCodeAt(offset);
        if (code > 0x7F) break;
        mem[ptr + offset] = code;
    }
    if (offset !== len) {
        if (offset !== 0) {
            arg = arg.slice(offset);
        }
        ptr = realloc(ptr, len, len = offset + arg.length * 3, 1) >>> 0;
        const view = getUint8ArrayMemory0().subarray(ptr + offset, ptr + len);
        const ret = cachedTextEncoder.encodeInto(arg, view);

        offset += ret.written;
        ptr = realloc(ptr, len, offset, 1) >>> 0;
    }

    WASM_VECTOR_LEN = offset;
    return ptr;
}

function takeFromExternrefTable0(idx) {
    const value = wasm.__wbindgen_externrefs.get(idx);
    wasm.__externref_table_dealloc(idx);
    return value;
}

let cachedTextDecoder = new TextDecoder('utf-8', { ignoreBOM: true, fatal: true });
cachedTextDecoder.decode();
const MAX_SAFARI_DECODE_BYTES = 2146435072;
let numBytesDecoded = 0;
function decodeText(ptr, len) {
    numBytesDecoded += len;
    if (numBytesDecoded >= MAX_SAFARI_DECODE_BYTES) {
        cachedTextDecoder = new TextDecoder('utf-8', { ignoreBOM: true, fatal: true });
        cachedTextDecoder.decode();
        numBytesDecoded = len;
    }
    return cachedTextDecoder.decode(getUint8ArrayMemory0().subarray(ptr, ptr + len));
}

const cachedTextEncoder = new TextEncoder();

if (!('encodeInto' in cachedTextEncoder)) {
    cachedTextEncoder.encodeInto = function (arg, view) {
        const buf = cachedTextEncoder.encode(arg);
        view.set(buf);
        return {
            read: arg.length,
            written: buf.length
        };
    };
}

let WASM_VECTOR_LEN = 0;

let wasmModule, wasmInstance, wasm;
function __wbg_finalize_init(instance, module) {
    wasmInstance = instance;
    wasm = instance.exports;
    wasmModule = module;
    cachedFloat64ArrayMemory0 = null;
    cachedUint8ArrayMemory0 = null;
    wasm.__wbindgen_start();
    return wasm;
}

async function __wbg_load(module, imports) {
    if (typeof Response === 'function' && module instanceof Response) {
        if (!module.ok) {
            throw new Error(`failed to fetch Wasm: ${module.status} ${module.statusText} fetching '${module.url}'`);
        }

        if (typeof WebAssembly.instantiateStreaming === 'function') {
            try {
                return await WebAssembly.instantiateStreaming(module, imports);
            } catch (e) {
                const validResponse = expectedResponseType(module.type);

                if (validResponse && module.headers.get('Content-Type') !== 'application/wasm') {
                    console.warn("`WebAssembly.instantiateStreaming` failed because your server does not serve Wasm with `application/wasm` MIME type. Falling back to `WebAssembly.instantiate` which is slower. Original error:\n", e);

                } else { throw e; }
            }
        }

        const bytes = await module.arrayBuffer();
        return await WebAssembly.instantiate(bytes, imports);
    } else {
        const instance = await WebAssembly.instantiate(module, imports);

        if (instance instanceof WebAssembly.Instance) {
            return { instance, module };
        } else {
            return instance;
        }
    }

    function expectedResponseType(type) {
        switch (type) {
            case 'basic': case 'cors': case 'default': return true;
        }
        return false;
    }
}

function initSync(module) {
    if (wasm !== undefined) return wasm;


    if (module !== undefined) {
        if (Object.getPrototypeOf(module) === Object.prototype) {
            ({module} = module)
        } else {
            console.warn('using deprecated parameters for `initSync()`; pass a single object instead')
        }
    }

    const imports = __wbg_get_imports();
    if (!(module instanceof WebAssembly.Module)) {
        module = new WebAssembly.Module(module);
    }
    const instance = new WebAssembly.Instance(module, imports);
    return __wbg_finalize_init(instance, module);
}

async function __wbg_init(module_or_path) {
    if (wasm !== undefined) return wasm;


    if (module_or_path !== undefined) {
        if (Object.getPrototypeOf(module_or_path) === Object.prototype) {
            ({module_or_path} = module_or_path)
        } else {
            console.warn('using deprecated parameters for the initialization function; pass a single object instead')
        }
    }

    if (module_or_path === undefined) {
        module_or_path = new URL('asuka_web_bg.wasm', import.meta.url);
    }
    const imports = __wbg_get_imports();

    if (typeof module_or_path === 'string' || (typeof Request === 'function' && module_or_path instanceof Request) || (typeof URL === 'function' && module_or_path instanceof URL)) {
        module_or_path = fetch(module_or_path);
    }

    const { instance, module } = await __wbg_load(await module_or_path, imports);

    return __wbg_finalize_init(instance, module);
}

export { initSync, __wbg_init as default };
